"""Command-line surface: ingest, featurize, fp, audit, train, eval, ablate,
fewshot, replay, attribute, report, selftest.

Exit codes: 0 success, 2 leakage threshold exceeded (audit), 64 usage error,
65 data error, 70 internal invariant violation. Every command writes a
manifest.json capturing argv, the resolved config, seeds, and input digests;
primary outputs are byte-stable under re-runs in single-threaded mode.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .audit import (
    AUDIT_CSV_COLUMNS,
    AuditReport,
    cross_target_transfer_audit,
    leakage_report,
    structural_bias_audit,
)
from .baselines import ForestConfig
from .datasets import (
    ACTIVE_THRESHOLD_PIC50,
    Dataset,
    ingest_csv,
    synth_structured_shift,
    write_csv,
    write_rejects,
)
from .errors import (
    InvariantViolationError,
    NestDrugError,
    ParameterError,
)
from .evalkit import stratified_kfold, temporal_split
from .experiments import (
    DeskProtocol,
    data_scarcity_comparison,
    derive_seed,
    evaluate_grid,
    fusion_comparison,
    l1_ablation,
    split_dataset,
    train_context_model,
)
from .fingerprint import morgan_fingerprint, write_fingerprint_file
from .molgraph import canonical_form, parse_smiles
from .nestmodel import FUSION_VARIANTS, ModelConfig, NestModel
from .training import (
    PhaseConfig,
    continual_update,
    few_shot_adapt_l1,
    finetune,
    pretrain,
)

EXIT_OK = 0
EXIT_LEAKAGE = 2
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_INTERNAL = 70


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config


def _write_manifest(out_dir, command, argv, config, seed, inputs,
                    wall_time_s):
    payload = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "root_seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs if os.path.exists(p)},
        "versions": {
            "nestdrug": __version__,
            "formats": ["CF1", "NDCK1", "NDRF1"],
        },
        "threads": int(os.environ.get("NESTDRUG_THREADS", "1")),
        "wall_time_s": wall_time_s,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_dataset(path, threshold=ACTIVE_THRESHOLD_PIC50, dedupe=True):
    ds, rejects = ingest_csv(path, active_threshold=threshold, dedupe=dedupe)
    return ds, rejects


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_ingest(args, argv) -> int:
    from .report import write_json
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    ds, rejects = _load_dataset(args.data, args.threshold, not args.no_dedupe)
    write_csv(ds, os.path.join(args.out, "dataset.csv"))
    write_rejects(rejects, os.path.join(args.out, "rejects.csv"))
    write_json(os.path.join(args.out, "ingest_summary.json"), {
        "n_records": len(ds),
        "n_rejects": len(rejects),
        "targets": ds.target_ids(),
        "warnings": ds.warnings,
    })
    _write_manifest(args.out, "ingest", argv,
                    {"threshold": args.threshold, "dedupe": not args.no_dedupe},
                    args.seed, [args.data], time.perf_counter() - t0)
    return EXIT_OK


def cmd_featurize(args, argv) -> int:
    from .report import write_csv_rows
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    ds, _ = _load_dataset(args.data)
    atom_rows = np.concatenate([r.graph.atom_features for r in ds.records])
    bond_mats = [r.graph.bond_features for r in ds.records
                 if r.graph.num_bonds > 0]
    rows = []
    for dim in range(atom_rows.shape[1]):
        rows.append({"kind": "atom", "dim": dim,
                     "mean": float(atom_rows[:, dim].mean()),
                     "std": float(atom_rows[:, dim].std())})
    if bond_mats:
        bond_rows = np.concatenate(bond_mats)
        for dim in range(bond_rows.shape[1]):
            rows.append({"kind": "bond", "dim": dim,
                         "mean": float(bond_rows[:, dim].mean()),
                         "std": float(bond_rows[:, dim].std())})
    write_csv_rows(os.path.join(args.out, "feature_stats.csv"), rows,
                   ["kind", "dim", "mean", "std"])
    _write_manifest(args.out, "featurize", argv, {}, args.seed, [args.data],
                    time.perf_counter() - t0)
    return EXIT_OK


def cmd_fp(args, argv) -> int:
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    ds, _ = _load_dataset(args.data)
    entries = []
    for r in ds.records:
        fp = morgan_fingerprint(r.graph, args.radius, args.nbits)
        entries.append((r.canonical.text, fp))
    write_fingerprint_file(os.path.join(args.out, "fingerprints.txt"),
                           entries, args.nbits, args.radius)
    _write_manifest(args.out, "fp", argv,
                    {"radius": args.radius, "nbits": args.nbits},
                    args.seed, [args.data], time.perf_counter() - t0)
    return EXIT_OK


def cmd_audit(args, argv) -> int:
    from .report import write_csv_rows, write_json
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    train_ds, _ = _load_dataset(args.train, args.threshold)
    eval_ds, _ = _load_dataset(args.eval, args.threshold)

    def canon(rec):
        if args.strip_stereo:
            return canonical_form(rec.graph, strip_stereo=True).text
        return rec.canonical.text

    report = AuditReport(fp_radius=args.radius, fp_nbits=args.nbits,
                         strip_stereo=args.strip_stereo,
                         threshold_pic50=args.threshold)
    for target in eval_ds.target_ids():
        ev = eval_ds.filter_target(target)
        actives = [r for r in ev.records if r.label == 1]
        decoys = [r for r in ev.records if r.label == 0]
        if not actives:
            continue
        train_t = train_ds.filter_target(target)
        train_any = [canon(r) for r in train_t.records]
        train_act = [canon(r) for r in train_t.records if r.label == 1]
        if not train_any:
            continue
        leak_any = leakage_report(train_any, [canon(r) for r in actives],
                                  [canon(r) for r in decoys])
        row = {
            "target_id": target,
            "n_eval_actives": len(actives),
            "n_eval_decoys": len(decoys),
            "n_train_any": len(train_any),
            "n_train_actives": len(train_act),
            "active_leakage_any_pct": leak_any.active_leakage_pct,
            "decoy_leakage_any_pct": leak_any.decoy_leakage_pct,
        }
        if train_act:
            leak_thr = leakage_report(train_act, [canon(r) for r in actives],
                                      [canon(r) for r in decoys])
            row["active_leakage_thresholded_pct"] = leak_thr.active_leakage_pct
        else:
            row["active_leakage_thresholded_pct"] = None
        if train_act and decoys:
            fps_train = [morgan_fingerprint(r.graph, args.radius, args.nbits)
                         for r in train_t.records if r.label == 1]
            fps_act = [morgan_fingerprint(r.graph, args.radius, args.nbits)
                       for r in actives]
            fps_dec = [morgan_fingerprint(r.graph, args.radius, args.nbits)
                       for r in decoys]
            bias = structural_bias_audit(fps_train, fps_act, fps_dec)
            row.update(bias.to_dict())
        report.rows.append(row)
    if args.cross_target and len(eval_ds.target_ids()) >= 2:
        by_target = {t: train_ds.filter_target(t)
                     for t in train_ds.target_ids()}
        by_target = {t: d for t, d in by_target.items() if len(d) >= 4}
        if len(by_target) >= 2:
            report.cross_target = cross_target_transfer_audit(
                by_target, ForestConfig(n_trees=args.trees, seed=args.seed),
                fp_radius=args.radius, fp_nbits=args.nbits)
    write_json(os.path.join(args.out, "audit.json"), report.to_dict())
    write_csv_rows(os.path.join(args.out, "audit.csv"), report.rows,
                   AUDIT_CSV_COLUMNS)
    _write_manifest(args.out, "audit", argv,
                    {"radius": args.radius, "nbits": args.nbits,
                     "strip_stereo": args.strip_stereo,
                     "leak_threshold": args.leak_threshold},
                    args.seed, [args.train, args.eval],
                    time.perf_counter() - t0)
    if report.mean_active_leakage() > args.leak_threshold:
        return EXIT_LEAKAGE
    return EXIT_OK


def _model_config_from(args_config: dict) -> ModelConfig:
    cfg = ModelConfig.from_dict(args_config) if args_config else ModelConfig()
    return cfg


def cmd_train(args, argv) -> int:
    from .report import write_json
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    config = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    _apply_overrides(config, args.set)
    ds, _ = _load_dataset(args.data)
    if args.checkpoint:
        model = NestModel.load(args.checkpoint)
    else:
        mc = config.get("model", {})
        mc.setdefault("l1_capacity", max(ds.target_ids(), default=0) + 1)
        model = NestModel.build(ModelConfig.from_dict(mc),
                                seed=derive_seed(args.seed, "init"))
    phase_kwargs = dict(config.get("phase", {}))
    phase_kwargs.setdefault("phase", args.phase)
    phase_kwargs.setdefault("seed", derive_seed(args.seed, "train"))
    pcfg = PhaseConfig(**phase_kwargs)
    if args.phase == "pretrain":
        rep = pretrain(model, ds, pcfg)
        report_payload = rep.to_dict()
    elif args.phase == "finetune":
        rep = finetune(model, ds, pcfg)
        report_payload = rep.to_dict()
    else:
        by_round: dict[int, list] = {}
        for r in ds.records:
            by_round.setdefault(r.round_id, []).append(r)
        rounds = [by_round[k] for k in sorted(by_round)]
        report_payload = {"rounds": continual_update(model, rounds, pcfg)}
    model.save(os.path.join(args.out, "model.ndck1"),
               extra_meta={"phase": args.phase})
    write_json(os.path.join(args.out, "train_report.json"), report_payload)
    _write_manifest(args.out, "train", argv, config, args.seed,
                    [args.data] + ([args.checkpoint] if args.checkpoint else []),
                    time.perf_counter() - t0)
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .report import write_csv_rows, write_json
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    model = NestModel.load(args.checkpoint)
    ds, _ = _load_dataset(args.data)
    kind, _, param = args.split.partition(":")
    if kind == "kfold":
        plan = stratified_kfold(ds.labels(), int(param or 5),
                                seed=derive_seed(args.seed, "split"))
        tag = "fold"
    elif kind == "temporal":
        plan = temporal_split(ds.years(), int(param))
        tag = "year"
    else:
        raise UsageError(f"unknown split {args.split!r}")
    rows = evaluate_grid(model, ds, plan)
    columns = ["target_id", tag, "n", "roc_auc", "pr_auc", "ef_at_1pct",
               "ef_at_5pct", "sensitivity", "specificity", "rmse", "r2",
               "pearson"]
    write_csv_rows(os.path.join(args.out, "eval_grid.csv"), rows, columns)
    agg = {}
    if rows:
        agg = {"mean_roc_auc": float(np.mean([r["roc_auc"] for r in rows]))}
    write_json(os.path.join(args.out, "eval_summary.json"),
               {"n_rows": len(rows), **agg, "warnings": plan.warnings})
    _write_manifest(args.out, "eval", argv, {"split": args.split}, args.seed,
                    [args.checkpoint, args.data], time.perf_counter() - t0)
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s != ""]


def cmd_ablate(args, argv) -> int:
    from .report import write_csv_rows, write_json
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    seeds = _parse_seeds(args.seeds)
    protocol = DeskProtocol(n_targets=args.targets,
                            n_per_target=args.per_target,
                            shift_strength=args.shift)
    config = {"seeds": seeds, "shift": args.shift, "mode": args.levels or "fusion"}
    if args.levels:
        if args.levels != "l1":
            raise UsageError("only the program-level (l1) ablation is wired")
        res = l1_ablation(args.shift, seeds, protocol, root_seed=args.seed)
        write_csv_rows(os.path.join(args.out, "ablation.csv"), res["rows"],
                       ["target_id", "seed", "auc_correct", "auc_generic",
                        "delta"])
        ttest = res["ttest"]
        write_json(os.path.join(args.out, "ablation_summary.json"), {
            "mean_delta": res["mean_delta"],
            "t": ttest.t if ttest else None,
            "p_raw": ttest.p_raw if ttest else None,
            "p_bonferroni": ttest.p_bonferroni if ttest else None,
            "cohens_d": ttest.cohens_d if ttest else None,
        })
    else:
        variants = args.fusion.split(",") if args.fusion else \
            ["film", "additive", "none", "concat_frozen"]
        for v in variants:
            if v not in FUSION_VARIANTS:
                raise UsageError(f"unknown fusion variant {v!r}")
        res = fusion_comparison(variants, seeds, protocol, root_seed=args.seed)
        write_csv_rows(os.path.join(args.out, "fusion.csv"), res["rows"],
                       ["variant", "seed", "auc"])
        write_json(os.path.join(args.out, "fusion_summary.json"),
                   {"means": res["means"]})
    _write_manifest(args.out, "ablate", argv, config, args.seed, [],
                    time.perf_counter() - t0)
    return EXIT_OK


def cmd_fewshot(args, argv) -> int:
    from .report import write_csv_rows
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    model = NestModel.load(args.checkpoint)
    ds, _ = _load_dataset(args.data)
    target = args.target
    sub = [r for r in ds.records if r.target_id == target]
    if not sub:
        raise ParameterError(f"no rows for target {target}")
    rng = np.random.default_rng(derive_seed(args.seed, "fewshot"))
    order = rng.permutation(len(sub))
    cut = max(1, len(sub) // 2)
    support = [sub[i] for i in order[:cut]]
    heldout = [sub[i] for i in order[cut:]]
    rows = []
    for shots in _parse_seeds(args.shots):
        res = few_shot_adapt_l1(model, support, heldout, shots,
                                steps=args.steps,
                                seed=derive_seed(args.seed, "shots", shots))
        rows.append({
            "target_id": target, "shots": shots,
            "zero_shot_auc": res["zero_shot_auc"],
            "adapted_auc": res["adapted_auc"],
            "delta": res["delta"],
            "row_norm": res["row_norm"],
        })
    write_csv_rows(os.path.join(args.out, "fewshot.csv"), rows,
                   ["target_id", "shots", "zero_shot_auc", "adapted_auc",
                    "delta", "row_norm"])
    _write_manifest(args.out, "fewshot", argv,
                    {"target": target, "shots": args.shots,
                     "steps": args.steps},
                    args.seed, [args.checkpoint, args.data],
                    time.perf_counter() - t0)
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    from .dmta import Campaign, ModelScorer, enrichment_summary, replay_campaign
    from .report import replay_curve, write_csv_rows, write_json
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    ds, _ = _load_dataset(args.data)
    scorer = args.scorer
    inputs = [args.data]
    if scorer == "model":
        if not args.checkpoint:
            raise UsageError("--scorer model needs --checkpoint")
        scorer = ModelScorer(NestModel.load(args.checkpoint))
        inputs.append(args.checkpoint)
    campaign = Campaign(pool=ds.records, rounds=args.rounds,
                        select_fraction=args.fraction, scorer=scorer,
                        seed=derive_seed(args.seed, "replay"))
    result = replay_campaign(campaign)
    write_json(os.path.join(args.out, "replay.json"), result.to_dict())
    write_csv_rows(os.path.join(args.out, "replay_rounds.csv"),
                   [{"round": r.round_no, "selected": len(r.selected_ids),
                     "hits": r.hits, "hit_rate": r.hit_rate}
                    for r in result.rounds],
                   ["round", "selected", "hits", "hit_rate"])
    if args.plot:
        replay_curve(os.path.join(args.out, "replay_curve.svg"),
                     [r.round_no for r in result.rounds],
                     {"hit_rate": [r.hit_rate for r in result.rounds],
                      "random": [result.random_hit_rate] * len(result.rounds)})
    _write_manifest(args.out, "replay", argv,
                    {"scorer": args.scorer, "rounds": args.rounds,
                     "fraction": args.fraction},
                    args.seed, inputs, time.perf_counter() - t0)
    return EXIT_OK


def cmd_attribute(args, argv) -> int:
    from .attribution import attribution_stats, integrated_gradients
    from .report import attribution_heatmap, write_json
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    model = NestModel.load(args.checkpoint)
    with open(args.smiles, "r", encoding="utf-8") as fh:
        smiles_list = [line.strip() for line in fh if line.strip()]
    contexts = []
    for chunk in args.contexts.split(";"):
        parts = [int(x) for x in chunk.split(",")]
        if len(parts) != 3:
            raise UsageError("contexts must be 'p,a,r;p,a,r;...'")
        contexts.append(tuple(parts))
    payload = {}
    results = {}
    for smi in smiles_list:
        graph = parse_smiles(smi)
        per_ctx = {}
        for ctx in contexts:
            res = integrated_gradients(graph, ctx, model, steps=args.steps)
            per_ctx[str(ctx)] = res
        results[smi] = per_ctx[str(contexts[0])]
        payload[smi] = {k: v.to_dict() for k, v in per_ctx.items()}
        attribution_heatmap(
            os.path.join(args.out,
                         f"attr_{hashlib.sha256(smi.encode()).hexdigest()[:10]}.svg"),
            {k: v.per_atom for k, v in per_ctx.items()},
            f"atom importance: {smi}")
    write_json(os.path.join(args.out, "attributions.json"), payload)
    write_json(os.path.join(args.out, "attribution_stats.json"),
               attribution_stats(results))
    _write_manifest(args.out, "attribute", argv,
                    {"steps": args.steps, "contexts": args.contexts},
                    args.seed, [args.checkpoint, args.smiles],
                    time.perf_counter() - t0)
    return EXIT_OK


def cmd_report(args, argv) -> int:
    from .report import emit_report
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    emit_report(args.results, args.out)
    _write_manifest(args.out, "report", argv, {"results": args.results},
                    args.seed, [], time.perf_counter() - t0)
    return EXIT_OK


def cmd_selftest(args, argv) -> int:
    checks = _selftest_checks()
    failed = 0
    for name, fn in checks:
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:  # noqa: BLE001 - report and continue
            failed += 1
            print(f"FAIL {name}: {exc}")
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_INTERNAL


def _selftest_checks():
    from . import tensorcore as tc
    from .evalkit import (
        enrichment_factor,
        excess_risk_decomposition,
        paired_t_test,
        roc_auc,
    )

    def roc_oracle():
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(4, 100))
            scores = rng.integers(0, 6, n).astype(float)
            labels = rng.integers(0, 2, n)
            if labels.sum() in (0, n):
                continue
            pos = scores[labels == 1][:, None]
            neg = scores[labels == 0][None, :]
            oracle = ((pos > neg).sum() + 0.5 * (pos == neg).sum()) \
                / (pos.size * neg.shape[1])
            assert roc_auc(scores, labels) == oracle

    def ef_hand():
        s = np.concatenate([np.ones(2), np.zeros(100)])
        y = np.concatenate([np.ones(2, int), np.zeros(100, int)])
        assert enrichment_factor(s, y, 0.01) == 51.0
        assert enrichment_factor(s, y, 1.0) == 1.0

    def theorem2():
        rng = np.random.default_rng(1)
        rows = [("g", 1.0, "c1", 0.5), ("g", -1.0, "c2", 0.5)]
        lc, ls, ex, var = excess_risk_decomposition(rows)
        assert (lc, ls, ex, var) == (0.0, 1.0, 1.0, 1.0)
        for _ in range(10):
            p = rng.random((3, 2, 3))
            p /= p.sum()
            yv = rng.standard_normal(2)
            table = [(g, yv[y], c, p[g, y, c]) for g in range(3)
                     for y in range(2) for c in range(3)]
            _, _, ex, var = excess_risk_decomposition(table)
            assert abs(ex - var) < 1e-10

    def ttest_value():
        r = paired_t_test([1, 2, 3, 4, 5])
        assert abs(r.t - 4.242640687119285) < 1e-12

    def adamw_hand():
        p = tc.Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        opt = tc.AdamW([tc.ParamGroup([p], lr=0.1, weight_decay=0.01)])
        opt.step()
        assert abs(p.data[0] - (0.999 - 0.1 / (1 + 1e-8))) < 1e-15

    def autodiff_fd():
        rng = np.random.default_rng(2)
        w = tc.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        x = tc.Tensor(rng.standard_normal((4, 3)))
        loss = tc.tsum(tc.tanh(tc.matmul(x, w)))
        tc.backward(loss, leaves=[w])
        flat = w.data.reshape(-1)
        g = w.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = tc.tsum(tc.tanh(tc.matmul(x, tc.Tensor(w.data)))).item()
            flat[i] = orig - 1e-5
            fm = tc.tsum(tc.tanh(tc.matmul(x, tc.Tensor(w.data)))).item()
            flat[i] = orig
            num = (fp - fm) / 2e-5
            assert abs(num - g[i]) < max(1e-5, 1e-3 * abs(num))

    def film_identity():
        from .nestmodel import make_batch
        cfg = DeskProtocol().model_config("film")
        cfg_none = DeskProtocol().model_config("none")
        for seed in (0, 1, 2):
            m_film = NestModel.build(cfg, seed=seed)
            m_none = NestModel.build(cfg_none, seed=seed)
            for name, p in m_film.params.items():
                if name in m_none.params:
                    m_none.params[name].data = p.data.copy()
            graphs = [parse_smiles(s) for s in ("CCO", "c1ccccc1", "CC(N)CCl")]
            batch = make_batch(graphs)
            ctx = [[1, 0, 0]] * 3
            a = m_film.forward(batch, ctx, 0).data
            b = m_none.forward(batch, ctx, 0).data
            assert np.array_equal(a, b)

    def leakage_exact():
        train = [f"CF1:m{i}" for i in range(100)]
        actives = [f"CF1:m{i}" for i in range(50)] + \
                  [f"CF1:x{i}" for i in range(50)]
        res = leakage_report(train, actives, [])
        assert res.active_leakage_pct == 50.0

    def dmta_oracle():
        from .dmta import Campaign, replay_campaign
        ds = synth_structured_shift(1, 100, 0.0, seed=5)
        for i, r in enumerate(ds.records):
            r.label = 1 if i < 40 else 0
        res = replay_campaign(Campaign(pool=ds.records, rounds=1,
                                       select_fraction=0.30, scorer="oracle"))
        assert res.enrichment == 2.5

    def ig_linear():
        from .attribution import integrated_gradients
        from .tensorcore import Tensor
        g = parse_smiles("CCO")
        W = np.random.default_rng(3).standard_normal((3, 70))

        class Lin:
            def forward(self, batch, ctx, task_id, atom_x=None, **kw):
                x = atom_x if atom_x is not None else Tensor(batch.atom_x)
                return tc.tsum(tc.mul(x, Tensor(W)))

        res = integrated_gradients(g, (0, 0, 0), Lin(), steps=16)
        expected = np.abs(W * g.atom_features).sum(axis=1)
        assert np.allclose(res.per_atom, expected, atol=1e-12)

    return [
        ("roc_auc matches pairwise oracle", roc_oracle),
        ("enrichment factor hand cases", ef_hand),
        ("excess-risk decomposition identity", theorem2),
        ("paired t statistic", ttest_value),
        ("adamw hand-computed step", adamw_hand),
        ("autodiff finite differences", autodiff_fd),
        ("modulation identity at init", film_identity),
        ("leakage 50% exact", leakage_exact),
        ("replay oracle enrichment 2.5", dmta_oracle),
        ("integrated gradients linear exactness", ig_linear),
    ]


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="nestdrug", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=True):
        if data:
            p.add_argument("--data", required=True)
        if out:
            p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", help="CSV -> validated dataset + rejects")
    common(p, data=True)
    p.add_argument("--threshold", type=float, default=ACTIVE_THRESHOLD_PIC50)
    p.add_argument("--no-dedupe", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("featurize", help="dataset -> feature statistics")
    common(p, data=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("fp", help="dataset -> fingerprint file")
    common(p, data=True)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--nbits", type=int, default=2048)
    p.set_defaults(func=cmd_fp)

    p = sub.add_parser("audit", help="train+eval -> leakage/bias forensics")
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    common(p)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--nbits", type=int, default=2048)
    p.add_argument("--strip-stereo", action="store_true")
    p.add_argument("--threshold", type=float, default=ACTIVE_THRESHOLD_PIC50)
    p.add_argument("--leak-threshold", type=float, default=25.0)
    p.add_argument("--cross-target", action="store_true")
    p.add_argument("--trees", type=int, default=60)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train", help="phase-driven training")
    common(p, data=True)
    p.add_argument("--phase", choices=("pretrain", "finetune", "continual"),
                   required=True)
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--set", action="append", default=[])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="checkpoint + split -> metric grid")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="kfold:5",
                   help="kfold:K or temporal:YEAR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="context/fusion ablation sweeps")
    common(p)
    p.add_argument("--levels", choices=("l1",))
    p.add_argument("--fusion")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--targets", type=int, default=4)
    p.add_argument("--per-target", type=int, default=500, dest="per_target")
    p.add_argument("--shift", type=float, default=0.8)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("fewshot", help="single-row context adaptation sweep")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--shots", default="10,25,50")
    p.add_argument("--steps", type=int, default=100)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("replay", help="iterative screening simulation")
    common(p, data=True)
    p.add_argument("--scorer", default="random",
                   choices=("random", "oracle", "fingerprint-nn", "model"))
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--fraction", type=float, default=0.30)
    p.add_argument("--checkpoint")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("attribute", help="integrated-gradients attribution")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--smiles", required=True)
    p.add_argument("--contexts", default="0,0,0")
    p.add_argument("--steps", type=int, default=50)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("report", help="aggregate CSVs -> summary + figures")
    p.add_argument("--results", required=True)
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolationError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except NestDrugError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
