"""Command-line entry point wiring the library into reproducible pipelines.

Commands: gen-synthetic, train, cv, predict, explain, stats, til. Every
command validates its configuration before doing any work, echoes the
resolved config (plus the tool version) into the output directory, and is
deterministic given (config, seed, data). Exit codes: 0 success, 1 data or
runtime error, 2 usage error. The environment variable ``RJC_SEED``
overrides the seed from any config file or flag.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import models as model_zoo
from . import stats as st
from . import training as tr
from .autodiff import Tensor
from .data import load_cohort_dir, save_cohort
from .errors import DataError, ParameterError, SurvfuseError
from .interpret import (
    AttentionMap,
    PatchCellCounts,
    integrated_gradients,
    modality_contribution,
    til_fraction,
    til_positive,
    top_attention_patches,
    TIL_MIN_CELLS,
    TIL_MIN_LYMPHOCYTES,
    TIL_MIN_TUMOR_CELLS,
)
from .models import risk_tensor
from .survival import make_bins

log = logging.getLogger(__name__)

SEED_ENV_VAR = "RJC_SEED"

DEFAULT_CONFIG = {
    "seed": 0,
    "training": {
        "lr": 2e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "l2": 1e-5,
        "l1": 1e-4,
        "epochs": 20,
        "beta_loss": 0.0,
        "grad_accum": 1,
    },
    "model": {
        "proj_dim": 512,
        "attn_dim": 256,
        "rep_dim": 32,
        "hidden_dim": 256,
        "fusion_hidden": 256,
        "dropout_keep": 0.75,
    },
    "cv": {
        "n_folds": 5,
        "standardize": True,
        "replicates": 1000,
        "level": 0.95,
        "risk_scheme": "median",
    },
    "synthetic": {
        "n": 600,
        "bag_size": 20,
        "d": 16,
        "p": 32,
        "w_wsi": 0.1,
        "w_mol": 0.1,
        "w_inter": 2.0,
        "censor_frac": 0.4,
        "signal_dims_wsi": 4,
        "signal_dims_mol": 8,
        "time_scale": 24.0,
    },
}


def load_run_config(path: str | None) -> dict:
    """Defaults deep-merged with the JSON config file; unknown keys are rejected."""
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is None:
        return config
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file does not exist: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ParameterError(f"config file {path} must contain a JSON object")
    for key, value in user.items():
        if key not in config:
            raise ParameterError(f"unknown config key {key!r}; known: {sorted(config)}")
        if isinstance(config[key], dict):
            if not isinstance(value, dict):
                raise ParameterError(f"config key {key!r} must be an object")
            for sub, sub_value in value.items():
                if sub not in config[key]:
                    raise ParameterError(
                        f"unknown config key {key}.{sub!r}; known: {sorted(config[key])}"
                    )
                config[key][sub] = sub_value
        else:
            config[key] = value
    return config


def resolve_seed(config: dict, flag_seed: int | None) -> int:
    seed = config["seed"]
    if flag_seed is not None:
        seed = flag_seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ParameterError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from None
    return int(seed)


def echo_config(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"tool_version": __version__, "command": command, "config": config}
    (out_dir / "config.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _train_config(config: dict, seed: int) -> tr.TrainConfig:
    return tr.TrainConfig(seed=seed, **config["training"])


def _json_dump(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    config = load_run_config(args.config)
    syn = config["synthetic"]
    for name in ("n", "bag_size", "d", "p", "w_wsi", "w_mol", "w_inter", "censor_frac"):
        flag = getattr(args, name, None)
        if flag is not None:
            syn[name] = flag
    seed = resolve_seed(config, args.seed)
    config["seed"] = seed
    out = Path(args.out)
    echo_config(out, "gen-synthetic", config)
    cohort = tr.gen_synthetic(
        n_patients=int(syn["n"]),
        bag_size=int(syn["bag_size"]),
        d=int(syn["d"]),
        p=int(syn["p"]),
        effect_weights=tr.EffectWeights(syn["w_wsi"], syn["w_mol"], syn["w_inter"]),
        censor_frac=float(syn["censor_frac"]),
        seed=seed,
        signal_dims_wsi=int(syn["signal_dims_wsi"]),
        signal_dims_mol=int(syn["signal_dims_mol"]),
        time_scale=float(syn["time_scale"]),
    )
    paths = save_cohort(cohort, out)
    print(f"wrote {len(cohort)} patients to {out} ({', '.join(p.name for p in paths.values())})")
    return 0


def _widths(config: dict) -> dict:
    return dict(config["model"])


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    seed = resolve_seed(config, args.seed)
    config["seed"] = seed
    out = Path(args.out)
    echo_config(out, "train", config)
    cohort = load_cohort_dir(args.data)
    cfg = _train_config(config, seed)

    work = cohort
    if config["cv"]["standardize"]:
        from .data import standardize_cohort

        work = standardize_cohort(cohort, np.arange(len(cohort)))
    bins = make_bins(work.labels())
    init_seed = int(np.random.SeedSequence(seed).generate_state(1, dtype=np.uint64)[0])
    model = model_zoo.build_model(
        args.model,
        tr.default_model_config(args.model, cohort.embed_dim, cohort.mol_dim, _widths(config)),
        np.random.default_rng(init_seed),
    )
    model, trace = tr.train(model, work, bins, cfg)
    model_zoo.save_checkpoint(model, out / "checkpoint.json")
    tr.write_loss_trace_csv(trace, out / "loss_trace.csv")
    print(f"trained {args.model} for {cfg.epochs} epochs; final mean loss {trace[-1]:.4f}")
    return 0


def cmd_cv(args) -> int:
    config = load_run_config(args.config)
    seed = resolve_seed(config, args.seed)
    config["seed"] = seed
    out = Path(args.out)
    echo_config(out, "cv", config)
    cohort = load_cohort_dir(args.data)
    cfg = _train_config(config, seed)
    cv_cfg = config["cv"]

    result = tr.cross_validate(
        cohort,
        cfg,
        args.model,
        widths=_widths(config),
        n_folds=int(cv_cfg["n_folds"]),
        standardize=bool(cv_cfg["standardize"]),
    )
    tr.write_predictions_csv(result, out / "predictions.csv")
    for fold, trace in enumerate(result.loss_traces):
        tr.write_loss_trace_csv(trace, out / f"loss_trace_fold{fold}.csv")

    boot_seed = int(np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)[1])
    ci_low, ci_high = st.bootstrap_ci(
        result.pooled,
        st.c_index,
        replicates=int(cv_cfg["replicates"]),
        seed=boot_seed,
        level=float(cv_cfg["level"]),
    )
    labels = st.risk_groups(result.pooled, cv_cfg["risk_scheme"])
    groups = st.group_tables(result.pooled, labels)
    curves = {}
    logrank_chi2, logrank_p = float("nan"), float("nan")
    if "low" in groups and "high" in groups:
        try:
            logrank_chi2, logrank_p = st.logrank_test(groups["low"], groups["high"])
        except DataError as exc:
            log.warning("logrank test unavailable: %s", exc)
        for name in ("low", "high"):
            curve = st.km_estimator(groups[name].time, groups[name].censored)
            curve.to_csv(out / f"km_{name}.csv")
            curves[name] = curve
        st.km_svg(curves, out / "km.svg")

    metrics = {
        "model": result.model_kind,
        "folds": [
            {"fold": k, "c_index": ci} for k, ci in enumerate(result.fold_c_indices)
        ],
        "c_index_mean": result.c_index_mean,
        "c_index_pooled": result.c_index_pooled,
        "ci_low": ci_low,
        "ci_high": ci_high,
        "logrank_chi2": logrank_chi2,
        "logrank_p": logrank_p,
    }
    _json_dump(out / "metrics.json", metrics)
    print(
        f"{result.model_kind}: mean c-index {result.c_index_mean:.4f} "
        f"(pooled {result.c_index_pooled:.4f}, 95% CI {ci_low:.4f}-{ci_high:.4f}, "
        f"logrank p {logrank_p:.3g})"
    )
    return 0


def cmd_predict(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = model_zoo.load_checkpoint(args.checkpoint)
    cohort = load_cohort_dir(args.data)
    table = st.RiskTable(
        patient_ids=[p.patient_id for p in cohort.patients],
        risk=np.asarray([tr.predict_risk(model, p) for p in cohort.patients]),
        time=np.asarray([p.label.t_cont for p in cohort.patients]),
        censored=np.asarray([p.label.censored for p in cohort.patients]),
    )
    table.to_csv(out / "predictions.csv")
    print(f"wrote risk predictions for {len(table)} patients to {out / 'predictions.csv'}")
    return 0


def _explain_one(model, patient, steps: int, out: Path, meta_names, svg: bool) -> dict:
    summary: dict = {"patient_id": patient.patient_id}

    def molecular_risk(x: Tensor) -> Tensor:
        if model.kind == "snn":
            return risk_tensor(model.forward(x, training=False).hazards)
        return risk_tensor(model.forward(patient.bag, x, training=False).hazards)

    if model.kind in ("snn", "mmf"):
        report = integrated_gradients(
            molecular_risk, patient.molecular, steps=steps, feature_names=meta_names
        )
        report.save_json(out / f"{patient.patient_id}_attribution.json")
        summary["completeness_gap"] = report.completeness_gap
        summary["relative_gap"] = report.relative_gap

    if model.kind in ("amil", "mmf"):
        fwd = (
            model.forward(patient.bag, training=False)
            if model.kind == "amil"
            else model.forward(patient.bag, patient.molecular, training=False)
        )
        amap = AttentionMap.build(
            patient.patch_ids(), fwd.attention.data, coords=patient.patch_coords
        )
        amap.to_csv(out / f"{patient.patient_id}_attention.csv")
        if svg:
            amap.to_svg(out / f"{patient.patient_id}_attention.svg")
        summary["n_patches"] = len(amap)

    if model.kind == "mmf":
        wsi_share, mol_share = modality_contribution(model, patient.bag, patient.molecular, steps)
        summary["wsi_share"] = wsi_share
        summary["mol_share"] = mol_share
    return summary


def cmd_explain(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = model_zoo.load_checkpoint(args.checkpoint)
    cohort = load_cohort_dir(args.data)
    if args.patient is not None:
        patients = [cohort.by_id(args.patient)]
    elif args.all:
        patients = cohort.patients
    else:
        raise ParameterError("explain requires --patient ID or --all")

    summaries = [
        _explain_one(model, p, args.steps, out, cohort.meta.names, args.svg) for p in patients
    ]
    if model.kind in ("amil", "mmf"):
        with (out / "attention_all.csv").open("w") as fh:
            fh.write("patient_id,patch_id,raw\n")
            for p in patients:
                fwd = (
                    model.forward(p.bag, training=False)
                    if model.kind == "amil"
                    else model.forward(p.bag, p.molecular, training=False)
                )
                for pid, raw in zip(p.patch_ids(), fwd.attention.data):
                    fh.write(f"{p.patient_id},{pid},{float(raw)!r}\n")
    _json_dump(out / "explain_summary.json", {"model": model.kind, "patients": summaries})
    for s in summaries:
        gap = s.get("relative_gap")
        shares = (
            f", shares wsi={s['wsi_share']:.3f}/mol={s['mol_share']:.3f}"
            if "wsi_share" in s
            else ""
        )
        gap_text = f"completeness gap {gap:.2e} (relative)" if gap is not None else "attention only"
        print(f"{s['patient_id']}: {gap_text}{shares}")
    return 0


def cmd_stats(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = st.RiskTable.from_csv(args.predictions)
    labels = st.risk_groups(table, args.scheme)
    groups = st.group_tables(table, labels)
    payload: dict = {
        "n_patients": len(table),
        "scheme": args.scheme,
        "c_index": st.c_index(table),
        "group_sizes": {name: len(g) for name, g in groups.items()},
    }
    ci_low, ci_high = st.bootstrap_ci(
        table, st.c_index, replicates=args.replicates, seed=args.seed or 0
    )
    payload["ci_low"], payload["ci_high"] = ci_low, ci_high
    if "low" in groups and "high" in groups:
        try:
            chi2, p = st.logrank_test(groups["low"], groups["high"])
            payload["logrank_chi2"], payload["logrank_p"] = chi2, p
        except DataError as exc:
            payload["logrank_error"] = str(exc)
        curves = {}
        for name in ("low", "high"):
            curve = st.km_estimator(groups[name].time, groups[name].censored)
            curve.to_csv(out / f"km_{name}.csv")
            curves[name] = curve
        st.km_svg(curves, out / "km.svg")
    _json_dump(out / "stats.json", payload)
    print(
        f"c-index {payload['c_index']:.4f} (95% CI {ci_low:.4f}-{ci_high:.4f}) "
        f"over {len(table)} patients"
    )
    return 0


def cmd_til(args) -> int:
    import pandas as pd

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    attention = pd.read_csv(args.attention, float_precision="round_trip")
    for col in ("patient_id", "patch_id", "raw"):
        if col not in attention.columns:
            raise DataError(f"{args.attention}: missing column {col!r}")
    counts_df = pd.read_csv(args.cellcounts)
    for col in ("patient_id", "patch_id", "total_cells", "lymphocytes", "tumor_cells"):
        if col not in counts_df.columns:
            raise DataError(f"{args.cellcounts}: missing column {col!r}")
    table = st.RiskTable.from_csv(args.risk_table)
    labels = st.risk_groups(table, "quartile")
    group_of = dict(zip(table.patient_ids, labels))

    counts_by_key = {
        (str(r.patient_id), str(r.patch_id)): PatchCellCounts(
            patch_id=str(r.patch_id),
            total_cells=int(r.total_cells),
            lymphocytes=int(r.lymphocytes),
            tumor_cells=int(r.tumor_cells),
        )
        for r in counts_df.itertuples()
    }

    rows = []
    n_missing_counts = 0
    attention_ids = set()
    for pid, group in attention.groupby(attention["patient_id"].astype(str)):
        attention_ids.add(pid)
        if pid not in group_of:
            continue
        amap = AttentionMap.build(group["patch_id"].astype(str).tolist(), group["raw"].to_numpy())
        top = top_attention_patches(amap, frac=args.frac)
        matched = [counts_by_key[(pid, patch)] for patch in top if (pid, patch) in counts_by_key]
        n_missing_counts += len(top) - len(matched)
        if not matched:
            continue
        rows.append(
            {
                "patient_id": pid,
                "risk_group": group_of[pid],
                "n_top": len(top),
                "n_matched": len(matched),
                "til_fraction": til_fraction(matched),
            }
        )

    missing_in_attention = sorted(set(table.patient_ids) - attention_ids)
    payload: dict = {
        "thresholds": {
            "min_total_cells": TIL_MIN_CELLS,
            "min_lymphocytes": TIL_MIN_LYMPHOCYTES,
            "min_tumor_cells": TIL_MIN_TUMOR_CELLS,
            "strict": True,
        },
        "top_fraction": args.frac,
        "n_patients_scored": len(rows),
        "n_top_patches_without_counts": n_missing_counts,
        "n_risk_patients_without_attention": len(missing_in_attention),
    }
    with (out / "til_fractions.csv").open("w") as fh:
        fh.write("patient_id,risk_group,n_top,n_matched,til_fraction\n")
        for r in rows:
            fh.write(
                f"{r['patient_id']},{r['risk_group']},{r['n_top']},{r['n_matched']},"
                f"{r['til_fraction']!r}\n"
            )
    low = [r["til_fraction"] for r in rows if r["risk_group"] == "low"]
    high = [r["til_fraction"] for r in rows if r["risk_group"] == "high"]
    payload["group_sizes"] = {"low": len(low), "high": len(high)}
    try:
        t, p = st.two_sample_t(low, high)
        payload["t_test"] = {"t": t, "p": p}
    except DataError as exc:
        payload["t_test"] = {"error": str(exc)}
    _json_dump(out / "til.json", payload)
    t_text = payload["t_test"].get("p")
    print(
        f"TIL fractions for {len(rows)} patients "
        f"(low/high groups {len(low)}/{len(high)}); "
        + (f"t-test p {t_text:.3g}" if isinstance(t_text, float) else f"t-test: {payload['t_test']['error']}")
    )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="survfuse",
        description="Multimodal survival learning pipelines (synthetic cohorts, CV, attribution, TIL analysis).",
    )
    parser.add_argument("--version", action="version", version=f"survfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synthetic", help="generate a synthetic cohort with known hazards")
    gen.add_argument("--out", required=True, help="output directory for the cohort CSVs")
    gen.add_argument("--config", help="JSON run config")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--n", type=int, help="number of patients")
    gen.add_argument("--bag-size", dest="bag_size", type=int)
    gen.add_argument("--d", type=int, help="patch embedding dimension")
    gen.add_argument("--p", type=int, help="molecular feature dimension")
    gen.add_argument("--w-wsi", dest="w_wsi", type=float)
    gen.add_argument("--w-mol", dest="w_mol", type=float)
    gen.add_argument("--w-inter", dest="w_inter", type=float)
    gen.add_argument("--censor-frac", dest="censor_frac", type=float)
    gen.set_defaults(func=cmd_gen_synthetic)

    train_p = sub.add_parser("train", help="train one model on a full cohort")
    train_p.add_argument("--model", required=True, choices=("snn", "amil", "mmf"))
    train_p.add_argument("--data", required=True, help="cohort directory")
    train_p.add_argument("--out", required=True)
    train_p.add_argument("--config")
    train_p.add_argument("--seed", type=int)
    train_p.set_defaults(func=cmd_train)

    cv = sub.add_parser("cv", help="stratified k-fold cross-validation with pooled predictions")
    cv.add_argument("--model", required=True, choices=("snn", "amil", "mmf"))
    cv.add_argument("--data", required=True)
    cv.add_argument("--out", required=True)
    cv.add_argument("--config")
    cv.add_argument("--seed", type=int)
    cv.set_defaults(func=cmd_cv)

    pred = sub.add_parser("predict", help="risk predictions from a saved checkpoint")
    pred.add_argument("--checkpoint", required=True)
    pred.add_argument("--data", required=True)
    pred.add_argument("--out", required=True)
    pred.set_defaults(func=cmd_predict)

    exp = sub.add_parser("explain", help="integrated-gradients attributions and attention maps")
    exp.add_argument("--checkpoint", required=True)
    exp.add_argument("--data", required=True)
    exp.add_argument("--out", required=True)
    exp.add_argument("--patient", help="patient id to explain")
    exp.add_argument("--all", action="store_true", help="explain every patient")
    exp.add_argument("--steps", type=int, default=50)
    exp.add_argument("--svg", action="store_true", help="also write attention scatter SVGs")
    exp.set_defaults(func=cmd_explain)

    stats_p = sub.add_parser("stats", help="c-index, bootstrap CI, KM curves, logrank from predictions")
    stats_p.add_argument("--predictions", required=True, help="risk table CSV")
    stats_p.add_argument("--out", required=True)
    stats_p.add_argument("--scheme", choices=st.RISK_SCHEMES, default="median")
    stats_p.add_argument("--replicates", type=int, default=1000)
    stats_p.add_argument("--seed", type=int)
    stats_p.set_defaults(func=cmd_stats)

    til = sub.add_parser("til", help="TIL fractions in top-attention patches by risk group")
    til.add_argument("--attention", required=True, help="CSV: patient_id,patch_id,raw")
    til.add_argument("--cellcounts", required=True,
                     help="CSV: patient_id,patch_id,total_cells,lymphocytes,tumor_cells")
    til.add_argument("--risk-table", dest="risk_table", required=True, help="risk table CSV")
    til.add_argument("--out", required=True)
    til.add_argument("--frac", type=float, default=0.01)
    til.set_defaults(func=cmd_til)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SurvfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
