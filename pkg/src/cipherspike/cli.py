"""Command-line front end: key provisioning, single inference, evaluation.

Exit codes: 0 success, 2 bad input (config, flags, file formats), 3 a
homomorphic-evaluation contract violation (level underflow, missing
rotation key, slot capacity).

Reports are line-oriented text on stdout followed by a JSON block; the
same JSON can be written to a file with --report.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from .backend import CkksBackend, SimBackend
from .ckks import CkksContext, load_keys, save_keys
from .errors import HeContractError, ValidationError
from .model_io import load_weights_csv, pack_frames, read_dataset
from .planner import NetworkModel, harvest_rotations, memory_estimate
from .profiles import PROFILES, get_profile, load_network

AUTHORITY_NOTE = (
    "note: refresh and exact-compare are served by a trusted decrypting "
    "authority (TEST MODE) — do not treat runs as end-to-end private")


def _load_net(name_or_path: str):
    return load_network(name_or_path)


def _build_backend(args, spec):
    """Returns (backend, params); rotation discipline mirrors the key file."""
    if args.backend == "sim":
        params = get_profile(args.profile)
        needed = harvest_rotations(spec, params.slots, params.fresh_level)
        be = SimBackend(fresh_level=params.fresh_level, slots=params.slots,
                        allowed_rotations=set(needed.indices))
        return be, params
    if not args.keys:
        raise ValidationError("ckks backend needs --keys (run keygen first)")
    ctx = load_keys(args.keys)
    params = ctx.params
    needed = harvest_rotations(spec, params.slots, params.fresh_level)
    allowed = ctx.provisioned_rotations
    if allowed is None:
        allowed = needed.indices
    missing = set(needed.indices) - set(allowed)
    if missing:
        raise ValidationError(
            f"key file lacks {len(missing)} rotation indices for this "
            f"network; re-run keygen with --net {args.net}")
    be = CkksBackend(ctx, allowed_rotations=set(allowed))
    return be, params


def _print_report(report: dict, path: str | None):
    print(json.dumps(report, indent=1, default=float))
    if path:
        with open(path, "w") as f:
            json.dump(report, f, indent=1, default=float)
            f.write("\n")


def _result_report(spec, model, be, params, results, seconds_total):
    schedule = [e.__dict__ if hasattr(e, "__dict__") else e._asdict()
                for r in results for e in r.schedule.events]
    mem = memory_estimate(params, len(model.rotation_plan().indices),
                          spec.timesteps)
    report = {
        "network": spec.name,
        "mode": model.mode,
        "backend": be.name,
        "timesteps": spec.timesteps,
        "predictions": [r.prediction for r in results],
        "class_sums": [[float(v) for v in r.class_sums] for r in results],
        "refresh_events": schedule,
        "refresh_count": sum(r.schedule.count for r in results),
        "compare_events": list(be.compare_log),
        "compare_count": sum(r.compare_events for r in results),
        "level_ledger": results[-1].level_ledger if results else [],
        "layer_seconds": {k: round(v, 6)
                          for k, v in results[-1].layer_seconds.items()}
                         if results else {},
        "step_seconds": {k: round(v, 6)
                         for k, v in results[-1].step_seconds.items()}
                        if results else {},
        "lif_dead_zones": {p.name: p.dead_zone for p in model.lif_plans},
        "counters": dict(be.counters),
        "memory_estimate": mem,
        "wall_seconds": round(seconds_total, 3),
    }
    return report


def cmd_keygen(args) -> int:
    spec = _load_net(args.net)
    params = get_profile(args.profile)
    plan = harvest_rotations(spec, params.slots, params.fresh_level)
    ctx = CkksContext(params, seed=args.seed)
    save_keys(args.out, ctx, rotations=plan.indices)
    print(f"network: {spec.name}")
    print(f"profile: {args.profile} (ring 2^{params.n.bit_length() - 1}, "
          f"{params.slots} slots, depth {params.depth})")
    print(f"rotation indices: {plan.count}")
    print(f"keys written: {args.out}")
    return 0


def _run_samples(args, spec, model, be, params, frames, indices):
    """Shared driver for infer/evaluate: returns per-sample results."""
    results = []
    for i in indices:
        packed = pack_frames(frames.data[i], spec.timesteps, params.slots)
        results.append(model.run(be, packed))
    return results


def cmd_infer(args) -> int:
    spec = _load_net(args.net)
    weights = load_weights_csv(args.weights, spec)
    frames = read_dataset(args.input, args.labels)
    if not (0 <= args.index < frames.count):
        raise ValidationError(
            f"--index {args.index} out of range (dataset has {frames.count})")
    be, params = _build_backend(args, spec)
    model = NetworkModel(spec, weights, mode=args.mode, slots=params.slots,
                         fresh_level=params.fresh_level)
    print(f"{spec.name}: sample {args.index}, mode {args.mode}, "
          f"backend {args.backend}")
    print(AUTHORITY_NOTE)
    t0 = time.time()
    results = _run_samples(args, spec, model, be, params, frames,
                           [args.index])
    dt = time.time() - t0
    res = results[0]
    plain_pred, _ = model.run_plain(frames.data[args.index])
    print(f"prediction: {res.prediction} (plaintext twin: {plain_pred}, "
          f"label: {int(frames.labels[args.index])})")
    print(f"refreshes: {res.schedule.count} {res.schedule.by_reason()}, "
          f"compares: {res.compare_events}, {dt:.2f}s")
    report = _result_report(spec, model, be, params, results, dt)
    report["plain_prediction"] = plain_pred
    report["label"] = int(frames.labels[args.index])
    _print_report(report, args.report)
    return 0


def cmd_evaluate(args) -> int:
    spec = _load_net(args.net)
    weights = load_weights_csv(args.weights, spec)
    frames = read_dataset(args.dataset, args.labels)
    count = min(args.count, frames.count)
    be, params = _build_backend(args, spec)
    model = NetworkModel(spec, weights, mode=args.mode, slots=params.slots,
                         fresh_level=params.fresh_level)
    print(f"{spec.name}: {count} samples, mode {args.mode}, "
          f"backend {args.backend}")
    print(AUTHORITY_NOTE)
    t0 = time.time()
    results = _run_samples(args, spec, model, be, params, frames,
                           list(range(count)))
    dt = time.time() - t0
    plain_preds = [model.run_plain(frames.data[i])[0] for i in range(count)]
    enc_preds = [r.prediction for r in results]
    labels = [int(v) for v in frames.labels[:count]]
    vs_plain = sum(e == p for e, p in zip(enc_preds, plain_preds))
    enc_acc = sum(e == l for e, l in zip(enc_preds, labels))
    plain_acc = sum(p == l for p, l in zip(plain_preds, labels))
    print(f"plaintext accuracy: {plain_acc}/{count}")
    print(f"encrypted accuracy: {enc_acc}/{count}")
    print(f"argmax agreement (encrypted vs plaintext): {vs_plain}/{count}")
    print(f"total {dt:.2f}s ({dt / max(count, 1):.2f}s/sample)")
    report = _result_report(spec, model, be, params, results, dt)
    report["plain_predictions"] = plain_preds
    report["labels"] = labels
    report["plain_accuracy"] = plain_acc / count if count else 0.0
    report["encrypted_accuracy"] = enc_acc / count if count else 0.0
    report["agreement_vs_plain"] = vs_plain / count if count else 0.0
    _print_report(report, args.report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cipherspike",
        description="Encrypted inference for spiking networks")
    sub = ap.add_subparsers(dest="command", required=True)

    kg = sub.add_parser("keygen", help="provision keys for a network")
    kg.add_argument("--net", required=True,
                    help="shipped network name or config JSON path")
    kg.add_argument("--profile", required=True, choices=sorted(PROFILES))
    kg.add_argument("--seed", type=int, default=0)
    kg.add_argument("--out", required=True, help="key file to write")
    kg.set_defaults(func=cmd_keygen)

    def common(p, dataset_flag: str):
        p.add_argument("--net", required=True)
        p.add_argument("--weights", required=True,
                       help="directory of layer<i>_weight.csv files")
        p.add_argument(dataset_flag, required=True,
                       help=".spkf frames or IDX images file")
        p.add_argument("--labels", default=None,
                       help="IDX labels file (IDX datasets only)")
        p.add_argument("--mode", required=True, choices=("approx", "switch"))
        p.add_argument("--backend", default="sim", choices=("sim", "ckks"))
        p.add_argument("--keys", default=None, help="key file (ckks backend)")
        p.add_argument("--profile", default="test", choices=sorted(PROFILES),
                       help="parameter profile for the sim backend")
        p.add_argument("--report", default=None, help="write JSON report here")

    inf = sub.add_parser("infer", help="run one encrypted inference")
    common(inf, "--input")
    inf.add_argument("--index", type=int, default=0,
                     help="sample index within the input file")
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("evaluate", help="encrypted accuracy over a dataset")
    common(ev, "--dataset")
    ev.add_argument("--count", type=int, default=16,
                    help="number of samples to run")
    ev.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except HeContractError as e:
        print(f"evaluation contract violated: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
