"""Command-line entry point. Work runs in-process unless ``run --server`` points at the service."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines, dataset, fixtures, scenarios, training
from .pipeline import Mode, Pipeline, RuleClassifier, SnnClassifier, event_dict, trace_readings
from .signal import read_trace, write_trace
from .snn import count_synops, encoder_from_meta, load_weights, save_weights

log = logging.getLogger("pdds")

SPLITS = ("train", "val", "test")


def _weights_arg(path: str | None) -> Path:
    if path:
        return Path(path)
    p = fixtures.bundled_weights()
    if p is None:
        raise SystemExit("no --weights given and no bundled weights found")
    return p


def _pick_split(gold: dataset.GoldSet, which: str, seed: int) -> dataset.GoldSet:
    if which == "all":
        return gold
    parts = dict(zip(SPLITS, dataset.split(gold, seed=seed)))
    return parts[which]


# --- subcommands ----------------------------------------------------------------

def cmd_run(a) -> int:
    trace = read_trace(a.trace)
    readings = trace_readings(trace)
    if a.server:
        return _run_remote(a, readings)
    if a.classifier == "rule":
        clf = RuleClassifier()
    else:
        net, meta = load_weights(_weights_arg(a.weights))
        clf = SnnClassifier(net, encoder_from_meta(meta), seed=a.seed)
    p = Pipeline(clf, mode=Mode(a.mode))
    n = 0
    with Path(a.log).open("w") as fh:
        for t, ev in p.run(readings):
            if ev.kind == "NoOp" and not a.noop:
                continue
            fh.write(json.dumps(event_dict(ev, t)) + "\n")
            n += 1
    st = p.stats
    print(f"{st.readings} readings, {st.emergencies} emergencies, {st.wakes} wakes, "
          f"{st.injections} injections, {st.notifications} notifications; "
          f"activation ratio {st.activation_ratio:.4f}; {n} events -> {a.log}")
    return 0


def _run_remote(a, readings) -> int:
    import httpx

    with httpx.Client(base_url=a.server, timeout=30.0) as c:
        r = c.post("/sessions", json={"mode": a.mode, "classifier": a.classifier, "seed": a.seed})
        r.raise_for_status()
        sid = r.json()["session_id"]
        n = 0
        with Path(a.log).open("w") as fh:
            for i in range(0, len(readings), 256):
                chunk = [{"t": x.t, "v": x.v} for x in readings[i:i + 256]]
                r = c.post(f"/sessions/{sid}/readings", json={"readings": chunk})
                r.raise_for_status()
                for ev in r.json()["events"]:
                    if ev["kind"] == "NoOp" and not a.noop:
                        continue
                    fh.write(json.dumps({"t": ev["t"], "kind": ev["kind"], **ev["data"]}) + "\n")
                    n += 1
        c.post(f"/sessions/{sid}/sync").raise_for_status()
        info = c.get(f"/sessions/{sid}").json()
        c.delete(f"/sessions/{sid}")
    print(f"{info['readings']} readings, {info['emergencies']} emergencies, {info['wakes']} wakes, "
          f"{info['injections']} injections; {n} events -> {a.log}")
    return 0


def _load_train_config(path: str | None) -> dict:
    p = Path(path) if path else fixtures.data_path(fixtures.TRAIN_CONFIG)
    return json.loads(p.read_text())


def cmd_train(a) -> int:
    conf = _load_train_config(a.config)
    gold = dataset.read_gold(a.gold)
    res, (tr, va, te) = training.fit_gold(
        gold, conf, on_epoch=lambda r: print(f"epoch {r['epoch']:3d}  lr {r['lr']:.2e}  "
                                             f"loss {r['train_loss']:.4f}  val {r['val_acc']:.4f}",
                                             flush=True))
    meta = {"timesteps": 50, "noise_sigma": 0.05, "axonal_delay": 2, "seed": 0,
            "best_epoch": res.best_epoch, "best_val_acc": res.best_val_acc,
            "train_seconds": res.seconds, "n_windows": len(gold),
            "split_sizes": [len(tr), len(va), len(te)], "train_config": conf}
    save_weights(res.net, a.out, meta)
    if a.history:
        training.write_history(res.history, a.history)
    rep = training.evaluate(res.net, te.features, te.labels)
    print(rep.table())
    print(f"best epoch {res.best_epoch}, val acc {res.best_val_acc:.4f}, {res.seconds:.0f} s -> {a.out}")
    return 0


def cmd_ingest(a) -> int:
    files = sorted(Path(a.traces).glob("*.csv"))
    if not files:
        raise SystemExit(f"no trace CSVs in {a.traces}")
    gold = dataset.build_gold((read_trace(f) for f in files), source=a.source)
    dataset.write_gold(gold, a.out)
    c = gold.class_counts()
    print(f"{len(files)} traces -> {len(gold)} windows (LOW {c[0]}, MEDIUM {c[1]}, HIGH {c[2]}) -> {a.out}")
    return 0


def cmd_synth(a) -> int:
    cfg = (dataset.SynthConfig.from_file(a.config) if a.config
           else dataset.SynthConfig.from_file(fixtures.data_path(fixtures.SYNTH_CONFIG)))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    traces = dataset.synth_generate(cfg)
    for tr in traces:
        write_trace(tr, out / f"{tr.patient}.csv")
    print(f"{len(traces)} synthetic traces -> {out}")
    return 0


def cmd_eval(a) -> int:
    net, meta = load_weights(_weights_arg(a.weights))
    gold = _pick_split(dataset.read_gold(a.gold), a.split, a.seed)
    rep = training.evaluate(net, gold.features, gold.labels, encoder_from_meta(meta),
                            n_repeats=a.repeats)
    rule = training.EvalReport.from_predictions(gold.labels, baselines.rule_assess_features(gold.features))
    if a.json:
        print(json.dumps({"snn": rep.to_dict(), "rule": rule.to_dict()}, indent=2))
    else:
        print(f"SNN on {len(gold)} windows ({a.split})")
        print(rep.table())
        print("\nADA rule baseline")
        print(rule.table())
    return 0


def cmd_scenarios(a) -> int:
    factory = None
    if not a.rule:
        p = fixtures.bundled_weights() if a.weights is None else Path(a.weights)
        if p is not None:
            net, meta = load_weights(p)
            factory = lambda: SnnClassifier(net, encoder_from_meta(meta), seed=0)
    t0 = time.perf_counter()
    res = scenarios.run_scenarios(a.mutate or (), factory)
    print(scenarios.format_report(res))
    print(f"{time.perf_counter() - t0:.2f} s")
    return 0 if all(r.passed for r in res) else 1


def cmd_energy(a) -> int:
    net, meta = load_weights(_weights_arg(a.weights))
    gold = _pick_split(dataset.read_gold(a.gold), a.split, a.seed)
    _, totals = training.predict(net, gold.features, encoder_from_meta(meta))
    synops = float(np.mean([count_synops(net, t) for t in totals]))
    if a.calibrate:
        model = baselines.EnergyModel.calibrated(synops)
    else:
        kw = {}
        if a.e_synop:
            kw["e_synop"] = a.e_synop
        if a.e_mac:
            kw["e_mac"] = a.e_mac
        model = baselines.EnergyModel(**kw)
    rep = baselines.energy_report(synops, model=model)
    print(baselines.energy_json(rep) if a.json else baselines.energy_table(rep))
    return 0


def cmd_serve(a) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(a.weights), host=a.host, port=a.port)
    return 0


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdds", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="stream a trace through the pipeline")
    p.add_argument("--trace", required=True)
    p.add_argument("--mode", choices=[m.value for m in Mode], default="diabetic")
    p.add_argument("--weights")
    p.add_argument("--log", required=True, help="JSON-lines event log")
    p.add_argument("--classifier", choices=("snn", "rule"), default="snn")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noop", action="store_true", help="also log NoOp events")
    p.add_argument("--server", help="service base URL; runs the session remotely")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train the spiking net on a Gold CSV")
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="training config JSON (default: bundled)")
    p.add_argument("--history", help="write per-epoch CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ingest", help="build a Gold CSV from trace CSVs")
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", default="external")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate synthetic CGM traces")
    p.add_argument("--config", help="generator config JSON (default: bundled)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for name, fn, helptext in (("eval", cmd_eval, "per-class metrics for SNN and rule baseline"),
                               ("energy", cmd_energy, "SynOps / MAC energy report")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--gold", required=True)
        p.add_argument("--weights")
        p.add_argument("--split", choices=("all",) + SPLITS, default="all",
                       help="evaluate one partition of the patient-level split")
        p.add_argument("--seed", type=int, default=0, help="split seed")
        p.add_argument("--json", action="store_true")
        p.set_defaults(func=fn)
        if name == "eval":
            p.add_argument("--repeats", type=int, default=1, help="encodings per window (majority vote)")
        else:
            p.add_argument("--calibrate", action="store_true", help="back-solve e_synop from the reference SNN energy")
            p.add_argument("--e-synop", type=float)
            p.add_argument("--e-mac", type=float)

    p = sub.add_parser("scenarios", help="run the 15-scenario suite")
    p.add_argument("--mutate", action="append", choices=scenarios.MUTATIONS)
    p.add_argument("--weights")
    p.add_argument("--rule", action="store_true", help="use the rule classifier instead of the SNN")
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--weights")
    p.set_defaults(func=cmd_serve)
    return ap


def main(argv: list[str] | None = None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return a.func(a)


if __name__ == "__main__":
    sys.exit(main())
