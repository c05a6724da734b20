"""Command-line client for the discovery service.

By default commands run against an in-process instance of the HTTP
service (no server needed); --server points the same client at a remote
deployment.  Subcommands mirror the pipeline stages plus a full `run`.
"""

from __future__ import annotations

import argparse
import base64
import csv
import json
import os
import sys
from pathlib import Path

import httpx
import tomli

from psipde import __version__
from psipde.pipeline import (
    EXIT_CONFIG,
    EXIT_IO,
    default_config_toml,
)

THREADS_ENV = "PSI_PDE_THREADS"


class _InProcessTransport(httpx.BaseTransport):
    """Drive the ASGI app from the synchronous client without a server."""

    def __init__(self, app):
        self._asgi = httpx.ASGITransport(app=app)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        import asyncio

        async def call():
            resp = await self._asgi.handle_async_request(request)
            body = await resp.aread()
            await resp.aclose()
            return resp.status_code, resp.headers, body

        status, headers, body = asyncio.run(call())
        return httpx.Response(status, headers=headers, content=body)


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from psipde.service import app

    return httpx.Client(
        transport=_InProcessTransport(app),
        base_url="http://psipde.local",
        timeout=None,
    )


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            print(f"warning: ignoring non-integer {THREADS_ENV}={env!r}", file=sys.stderr)
    return 1


def _read_b64(path: str) -> str:
    try:
        return base64.b64encode(Path(path).read_bytes()).decode("ascii")
    except OSError as e:
        _fail(f"cannot read {path}: {e}", EXIT_IO)


def _write_bytes(path: str, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        _fail(f"cannot write {path}: {e}", EXIT_IO)


def _fail(message: str, code: int = 1):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        if isinstance(detail, dict) and "exit_code" in detail:
            _fail(f"stage '{detail['stage']}' failed: {detail['message']}",
                  detail["exit_code"])
        _fail(f"{path} failed ({resp.status_code}): {detail}", EXIT_CONFIG
              if resp.status_code == 422 else 1)
    return resp.json()


def _load_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        _fail(f"config file not found: {path}", EXIT_CONFIG)
    except tomli.TOMLDecodeError as e:
        _fail(f"invalid TOML in {path}: {e}", EXIT_CONFIG)


def _section(cfg_path: str | None, name: str) -> dict:
    if not cfg_path:
        return {}
    return dict(_load_toml(cfg_path).get(name, {}))


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    payload = {
        "system": args.system,
        "noise_level": args.noise,
        "seed": args.seed,
    }
    if args.config:
        raw = _load_toml(args.config)
        if "grid" in raw:
            payload["grid"] = dict(raw["grid"])
        sim = raw.get("simulate", {})
        if "coefficients" in sim:
            payload["coefficients"] = dict(sim["coefficients"])
    with _client(args.server) as client:
        out = _post(client, "/simulate", payload)
    _write_bytes(args.out, base64.b64decode(out["measured_b64"]))
    if args.clean_out:
        _write_bytes(args.clean_out, base64.b64decode(out["clean_b64"]))
    if args.verbose:
        print(json.dumps(out["stats"], indent=2))
    print(f"wrote {args.out}")
    return 0


def cmd_denoise(args) -> int:
    payload = {"field_b64": _read_b64(args.infile)}
    train = _section(args.config, "denoise")
    train.setdefault("seed", args.seed)
    payload["train"] = train
    with _client(args.server) as client:
        out = _post(client, "/denoise", payload)
    _write_bytes(args.out, base64.b64decode(out["denoised_b64"]))
    if args.verbose:
        print(
            f"epochs: {out['epochs_run']}, best val loss: {out['best_val_loss']:.3e}, "
            f"residual std: {out['residual_std']:.4g}"
        )
    print(f"wrote {args.out}")
    return 0


def cmd_discover(args) -> int:
    payload = {"field_b64": _read_b64(args.infile)}
    features = _section(args.config, "features")
    if features:
        payload["features"] = features
    select = _section(args.config, "select")
    select.setdefault("seed", args.seed)
    select["threads"] = _threads(args)
    payload["select"] = select
    with _client(args.server) as client:
        out = _post(client, "/discover", payload)
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    if args.verbose:
        for br in out["branches"]:
            tag = " (main)" if br["is_main"] else ""
            print(f"branch {br['support']}{tag}: {br['labels']}")
    print(f"wrote {args.out}")
    return 0


def cmd_refine(args) -> int:
    try:
        trace = json.loads(Path(args.trace).read_text())
    except (OSError, ValueError) as e:
        _fail(f"cannot read trace {args.trace}: {e}", EXIT_IO)
    candidates = [
        {
            "terms": [
                {"label": lab, "coefficient": c}
                for lab, c in zip(br["labels"], br["coefficients"])
            ]
        }
        for br in trace["branches"]
    ]
    payload = {"field_b64": _read_b64(args.data), "candidates": candidates}
    refine = _section(args.config, "refine")
    if refine:
        payload["refine"] = refine
    with _client(args.server) as client:
        out = _post(client, "/refine", payload)
    Path(args.report).write_text(json.dumps(out, indent=2) + "\n")
    winner = out["candidates"][out["winner"]]
    print(winner["optimized"]["equation"])
    print(f"wrote {args.report}")
    return 0


def cmd_run(args) -> int:
    if not args.config:
        _fail("run requires --config", EXIT_CONFIG)
    raw = _load_toml(args.config)
    pipe = raw.setdefault("pipeline", {})
    if args.seed is not None:
        pipe["seed"] = args.seed
    if args.threads is not None or os.environ.get(THREADS_ENV):
        pipe["threads"] = _threads(args)
    out_dir = Path(args.out_dir or pipe.get("out_dir", "out"))
    with _client(args.server) as client:
        out = _post(client, "/run", {"config": raw})
    out_dir.mkdir(parents=True, exist_ok=True)
    for art in out["artifacts"].values():
        _write_bytes(str(out_dir / art["filename"]), base64.b64decode(art["content_b64"]))
    print(out["report"]["equation"])
    print(f"artifacts in {out_dir}")
    return 0


def cmd_compare_stridge(args) -> int:
    raw = _load_toml(args.params)
    params = raw.get("params")
    if not params:
        _fail("params file needs an array of tables [[params]] with "
              "ridge_lambda and d_tol", EXIT_CONFIG)
    payload = {
        "field_b64": _read_b64(args.infile),
        "params": [dict(p) for p in params],
        "seed": args.seed,
    }
    features = dict(raw.get("features", {}))
    if features:
        payload["features"] = features
    with _client(args.server) as client:
        out = _post(client, "/compare-stridge", payload)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ridge_lambda", "d_tol", "support", "terms", "coefficients", "val_error"])
        for row in out["rows"]:
            w.writerow(
                [
                    row["ridge_lambda"],
                    row["d_tol"],
                    " ".join(map(str, row["support"])),
                    " ".join(row["labels"]),
                    " ".join(f"{c:.6g}" for c in row["coefficients"]),
                    row["val_error"],
                ]
            )
    if args.verbose:
        for row in out["rows"]:
            print(
                f"lambda={row['ridge_lambda']:g} d_tol={row['d_tol']:g} -> "
                f"{row['labels'] or '(empty)'}"
            )
    print(f"wrote {args.out}")
    return 0


def cmd_config(args) -> int:
    if args.print_defaults or not args.config:
        print(default_config_toml(), end="")
        return 0
    # validate a config file against the service
    raw = _load_toml(args.config)
    from psipde.pipeline import ConfigError, config_from_dict

    try:
        config_from_dict(raw)
    except ConfigError as e:
        _fail(str(e), EXIT_CONFIG)
    print(f"{args.config}: OK")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psipde",
        description="Discover governing PDEs from noisy space-time measurements.",
    )
    parser.add_argument("--version", action="version", version=__version__)

    def common(sp):
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--seed", type=int, default=0, help="root random seed")
        sp.add_argument("--out-dir", help="output directory (run)")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (fallback: ${THREADS_ENV})")
        sp.add_argument("--verbose", action="store_true")
        sp.add_argument("--server", help="remote service URL (default: in-process)")

    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="simulate a benchmark system")
    sp.add_argument("--system", required=True, choices=["burgers1d", "kdv", "burgers2d"])
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--out", required=True, help="measured-field PSIG path")
    sp.add_argument("--clean-out", help="also save the noise-free field")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("denoise", help="smooth a noisy field with the neural surrogate")
    sp.add_argument("--in", dest="infile", required=True, help="input PSIG")
    sp.add_argument("--out", required=True, help="denoised PSIG")
    common(sp)
    sp.set_defaults(func=cmd_denoise)

    sp = sub.add_parser("discover", help="run progressive term selection")
    sp.add_argument("--in", dest="infile", required=True, help="input PSIG")
    sp.add_argument("--out", required=True, help="selection trace JSON")
    common(sp)
    sp.set_defaults(func=cmd_discover)

    sp = sub.add_parser("refine", help="refine candidate equations by forward solves")
    sp.add_argument("--trace", required=True, help="selection trace JSON")
    sp.add_argument("--data", required=True, help="field PSIG to fit against")
    sp.add_argument("--report", required=True, help="output report JSON")
    common(sp)
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("run", help="full pipeline from a config file")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare-stridge", help="STRidge baseline over a parameter grid")
    sp.add_argument("--in", dest="infile", required=True, help="input PSIG")
    sp.add_argument("--grid-of-params", dest="params", required=True,
                    help="TOML with [[params]] tables (ridge_lambda, d_tol)")
    sp.add_argument("--out", required=True, help="output CSV table")
    common(sp)
    sp.set_defaults(func=cmd_compare_stridge)

    sp = sub.add_parser("config", help="print or validate configuration")
    sp.add_argument("--print-defaults", action="store_true",
                    help="print the documented default configuration")
    common(sp)
    sp.set_defaults(func=cmd_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
