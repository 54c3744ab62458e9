"""Command-line client for the pipelab service.

Every verb becomes one HTTP request.  By default the service runs in-process
behind an ASGI transport (no socket, no separate process); pass --server to
talk to a deployed instance instead, `pipelab serve` to start one.

Exit codes: 0 success, 1 a check or comparison that ran and failed, 2 bad
usage, bad config, or a request the service rejected.  PIPELAB_SEED seeds
the runtime-check fixtures when --seed is not given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import httpx

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=300.0)
    # No server given: mount the app in-process.  TestClient is just a sync
    # httpx.Client over an ASGI portal, so both paths share the verbs below.
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from starlette.testclient import TestClient

    from .service import create_app
    return TestClient(create_app(), raise_server_exceptions=False)


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    r = client.post(path, json=payload)
    if r.status_code == 400 or r.status_code == 422:
        detail = r.json().get("detail", r.text)
        print(f"error: {detail}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    r.raise_for_status()
    return r.json()


def _default_seed() -> int:
    return int(os.environ.get("PIPELAB_SEED", "0"))


def _dims_args(sp: argparse.ArgumentParser, defaults: dict | None = None) -> None:
    d = defaults or {}
    sp.add_argument("-L", type=int, default=d.get("L"), required="L" not in d)
    sp.add_argument("--h", type=int, default=d.get("h"), required="h" not in d)
    sp.add_argument("-s", type=int, default=d.get("s"), required="s" not in d)
    sp.add_argument("-b", type=int, default=d.get("b", 1))
    sp.add_argument("--heads", type=int, default=d.get("heads", 1))
    sp.add_argument("-p", type=int, default=d.get("p"), required="p" not in d)
    sp.add_argument("-m", type=int, default=d.get("m"), required="m" not in d)
    sp.add_argument("--sp", type=int, default=d.get("sp", 1))


def _dims_payload(args: argparse.Namespace) -> dict:
    return {"L": args.L, "h": args.h, "s": args.s, "b": args.b,
            "heads": args.heads, "p": args.p, "m": args.m, "sp": args.sp}


def _comm_payload(spec: str) -> dict:
    if spec == "zero":
        return {"mode": "zero"}
    if spec == "device":
        return {"mode": "device"}
    if spec.startswith("uniform:"):
        nums = [int(x) for x in spec.split(":")[1:]]
        out = {"mode": "uniform", "cost": nums[0]}
        if len(nums) > 1:
            out["latency"] = nums[1]
        if len(nums) > 2:
            out["ref_volume"] = nums[2]
        return out
    print(f"error: bad --comm spec {spec!r}", file=sys.stderr)
    raise SystemExit(EXIT_USAGE)


def cmd_simulate(args: argparse.Namespace) -> int:
    payload = {
        "method": args.method,
        "dims": _dims_payload(args),
        "mode": args.mode,
        "unit_times": args.unit_times,
        "device": args.device,
        "qkv_in_attention": not args.no_qkv_in_attention,
        "comm": _comm_payload(args.comm),
        "tolerance": args.tolerance,
        "include_trace": args.trace is not None,
        "include_overlap": args.overlap,
    }
    with _client(args.server) as client:
        resp = _post(client, "/simulate", payload)
    print(f"method {resp['method']}  makespan {resp['makespan']} {resp['time_unit']}"
          f"  bubble fraction {resp['bubble_fraction']:.4f}")
    print(f"per-stage bubble: {resp['per_stage_bubble']}")
    print(f"per-stage peak activation elements: {resp['per_stage_peak_activation']}")
    if resp.get("steady_state_wait") is not None:
        print(f"steady-state comm wait: {resp['steady_state_wait']}")
    for ln in resp["analytic_lines"]:
        print(ln)
    if args.trace is not None:
        Path(args.trace).write_text(json.dumps(resp["trace"], indent=1))
        print(f"trace written to {args.trace}")
    if resp["analytic_ok"] is None:
        return EXIT_OK
    return EXIT_OK if resp["analytic_ok"] else EXIT_FAILED


def cmd_validate(args: argparse.Namespace) -> int:
    if args.schedule_file:
        payload: dict = {"schedule_text": Path(args.schedule_file).read_text()}
    elif args.method:
        payload = {"method": args.method, "dims": _dims_payload(args),
                   "unit_times": args.unit_times,
                   "qkv_in_attention": not args.no_qkv_in_attention}
    else:
        print("error: give a schedule file or --method with dims", file=sys.stderr)
        return EXIT_USAGE
    with _client(args.server) as client:
        resp = _post(client, "/validate", payload)
    verdict = "valid" if resp["ok"] else f"INVALID: {resp['error']}"
    print(f"{resp['method']}: {resp['tasks']} tasks on {resp['stages']} stages -> {verdict}")
    return EXIT_OK if resp["ok"] else EXIT_FAILED


def cmd_runtime_check(args: argparse.Namespace) -> int:
    payload = {
        "dims": _dims_payload(args),
        "methods": args.methods,
        "seed": args.seed if args.seed is not None else _default_seed(),
        "mlp_chunk": args.chunk,
        "threaded": args.threaded,
    }
    with _client(args.server) as client:
        resp = _post(client, "/runtime-check", payload)
    for ln in resp["detail"]:
        print(ln)
    print("losses:", " ".join(f"{x:.6f}" for x in resp["losses"]))
    return EXIT_OK if resp["ok"] else EXIT_FAILED


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    payload = {"config_text": text, "outdir": args.outdir}
    with _client(args.server) as client:
        resp = _post(client, "/sweep", payload)
    for ln in resp["report"]:
        print(ln)
    for a in resp["artifacts"]:
        print(f"wrote {a}")
    return resp["exit_code"]


def cmd_overlap_threshold(args: argparse.Namespace) -> int:
    payload = {"device": args.device, "h": args.h, "b": args.b,
               "heads": args.heads, "lo": args.lo, "hi": args.hi,
               "qkv_in_attention": not args.no_qkv_in_attention,
               "link_bandwidth": args.bandwidth, "link_latency": args.latency}
    with _client(args.server) as client:
        resp = _post(client, "/overlap-threshold", payload)
    for ln in resp["lines"]:
        print(ln)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pipelab",
        description="Pipeline-parallel schedule laboratory (client for the "
                    "pipelab service; in-process unless --server is given).")
    ap.add_argument("--server", default=None,
                    help="base URL of a running service (default: in-process)")
    sub = ap.add_subparsers(dest="cmd", required=True)

    sim = sub.add_parser("simulate", help="generate and simulate one schedule")
    sim.add_argument("--method", required=True)
    _dims_args(sim)
    sim.add_argument("--mode", choices=("unit", "flops"), default="unit")
    sim.add_argument("--unit-times", dest="unit_times", type=int, nargs=3,
                     default=(1, 3, 2), metavar=("PRE", "ATTN", "POST"))
    sim.add_argument("--device", default="h20_like")
    sim.add_argument("--no-qkv-in-attention", action="store_true")
    sim.add_argument("--comm", default="zero",
                     help="zero | uniform:<cost>[:<latency>[:<ref>]] | device")
    sim.add_argument("--tolerance", type=float, default=0.0)
    sim.add_argument("--trace", default=None, metavar="PATH",
                     help="write a Chrome trace JSON here")
    sim.add_argument("--overlap", action="store_true",
                     help="report steady-state communication waits")
    sim.set_defaults(fn=cmd_simulate)

    val = sub.add_parser("validate", help="validate a schedule file or a "
                                          "freshly generated schedule")
    val.add_argument("schedule_file", nargs="?", default=None)
    val.add_argument("--method", default=None)
    _dims_args(val, defaults={"L": 4, "h": 8, "s": 8, "b": 1, "heads": 2,
                              "p": 2, "m": 4})
    val.add_argument("--unit-times", dest="unit_times", type=int, nargs=3,
                     default=(1, 3, 2))
    val.add_argument("--no-qkv-in-attention", action="store_true")
    val.set_defaults(fn=cmd_validate)

    rtc = sub.add_parser("runtime-check",
                         help="execute schedules numerically and compare "
                              "against the sequential reference")
    _dims_args(rtc, defaults={"L": 4, "h": 8, "s": 8, "b": 2, "heads": 2,
                              "p": 2, "m": 4})
    rtc.add_argument("--methods", nargs="+",
                     default=["1f1b", "zb1p", "helix_naive", "helix_twofold",
                              "helix_twofold_rc"])
    rtc.add_argument("--seed", type=int, default=None,
                     help="fixture seed (default: PIPELAB_SEED or 0)")
    rtc.add_argument("--chunk", type=int, default=None, help="MLP chunk rows")
    rtc.add_argument("--threaded", action="store_true",
                     help="run stages as threads instead of replay")
    rtc.set_defaults(fn=cmd_runtime_check)

    sw = sub.add_parser("sweep", help="run an experiment config")
    sw.add_argument("config")
    sw.add_argument("--outdir", default=None)
    sw.set_defaults(fn=cmd_sweep)

    th = sub.add_parser("overlap-threshold",
                        help="find the s where attention covers the transfer")
    th.add_argument("--device", default="h20_like")
    th.add_argument("--h", type=int, required=True)
    th.add_argument("-b", type=int, default=1)
    th.add_argument("--heads", type=int, default=1)
    th.add_argument("--lo", type=int, default=1024)
    th.add_argument("--hi", type=int, default=1 << 20)
    th.add_argument("--no-qkv-in-attention", action="store_true")
    th.add_argument("--bandwidth", type=int, default=None,
                    help="override link bandwidth, bytes/s")
    th.add_argument("--latency", type=float, default=None,
                    help="override link latency, seconds")
    th.set_defaults(fn=cmd_overlap_threshold)

    srv = sub.add_parser("serve", help="run the HTTP service")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    srv.set_defaults(fn=cmd_serve)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except httpx.HTTPError as e:
        print(f"error: service request failed: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
