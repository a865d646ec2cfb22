"""Command line entry point: ``kgrerank <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import LAMBDA_GRID, PUBLISHED_COUNTS, ConfigError, RunConfig, Toggles
from .evaluation import RetrievalSettings, evaluate, format_table
from .kge import KgeModel, Query, train_kge
from .kgstore import load_dataset, save_dataset
from .rerank import (
    LossConfig,
    RerankerModel,
    RerankSample,
    build_training_samples,
    make_sample,
    train_reranker,
)
from .retriever import build_index
from .synthetic import make_synthetic_kg

logger = logging.getLogger("kgrerank")

KGE_CKPT = "kge.ckpt"
RR_CKPT = "reranker.ckpt"
SAMPLES = "samples.jsonl"
TRAIN_LOG = "train_log.jsonl"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# --------------------------------------------------------------------------
# config resolution

_FLAG_FIELDS = {
    "dataset_dir": str, "kind": str, "K": int, "lam": float, "K_q": int, "K_c": int, "theta": float,
    "d": int, "d_r": int, "rr_hidden": int, "kge_epochs": int, "rr_epochs": int, "batch": int,
    "kge_batch": int, "lr_kge": float, "lr_rr": float, "rr_optimizer": str, "seed": int, "out_dir": str,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--preset", help="dataset preset (wiki27k, fb15k-237-n, reverb20k, reverb45k)")
    for name, typ in _FLAG_FIELDS.items():
        flag = "--" + ("lambda" if name == "lam" else name.replace("_", "-"))
        p.add_argument(flag, dest=name, type=typ, default=None)
    p.add_argument("--toggles", help="bitmap over qci,cci,qp,cp,cg,dp, e.g. 110011")
    p.add_argument("--gold-first", dest="gold_first", action="store_const", const=True, default=None)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    if args.preset:
        raw["preset"] = args.preset
    for name in _FLAG_FIELDS:
        val = getattr(args, name, None)
        if val is not None:
            if name == "lam":
                raw.pop("lambda", None)
            raw[name] = val
    toggles = dict(raw.get("toggles") or {})
    if args.toggles:
        toggles.update(vars(Toggles.from_bitmap(args.toggles)))
        toggles.pop("gold_first")
    if args.gold_first:
        toggles["gold_first"] = True
    if toggles:
        raw["toggles"] = toggles
    return RunConfig.from_dict(raw)


def _write_config(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    return out


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


# --------------------------------------------------------------------------
# stages


def _load_kg(cfg: RunConfig):
    if not cfg.dataset_dir:
        raise StageError("ingest", "no dataset_dir configured")
    try:
        return load_dataset(cfg.dataset_dir, cfg.kind)
    except (OSError, ValueError) as exc:
        raise StageError("ingest", str(exc)) from exc


def stage_train_kge(cfg: RunConfig, kg, out: Path) -> KgeModel:
    history: list[float] = []
    model = train_kge(kg, d=cfg.d, epochs=cfg.kge_epochs, lr=cfg.lr_kge, seed=cfg.seed,
                      batch_size=cfg.kge_batch, history=history)
    model.save(out / KGE_CKPT)
    with open(out / "kge_log.jsonl", "w", encoding="utf-8") as fh:
        for i, loss in enumerate(history, 1):
            fh.write(_dump({"epoch": i, "loss": loss}) + "\n")
    return model


def stage_build_samples(cfg: RunConfig, kg, kge_model: KgeModel, out: Path) -> list[RerankSample]:
    t = cfg.toggles
    samples = build_training_samples(kg, kge_model, cfg.K, cfg.seed, qci=t.qci, dp=t.dp, gold_first=t.gold_first)
    with open(out / SAMPLES, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(_dump(s.to_json()) + "\n")
    return samples


def load_samples(cfg: RunConfig, kg, path: Path) -> list[RerankSample]:
    """Rebuild samples from ``samples.jsonl`` under the configured text toggles."""
    from .decoding import parse_ranking

    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            q = Query(rec["entity"], rec["rel"], rec["direction"])
            s = make_sample(kg, q, rec["gold"], rec["candidates"], rec["kge_scores"], rec["query_id"],
                            qci=cfg.toggles.qci, dp=cfg.toggles.dp)
            diag = parse_ranking(rec["target"], len(rec["candidates"]))
            if not diag.ok:
                raise StageError("train-rerank", f"{path}: bad target {rec['target']!r} for query {rec['query_id']}")
            s.target = np.array(diag.permutation, dtype=np.int64) - 1
            samples.append(s)
    return samples


def stage_train_rerank(cfg: RunConfig, samples, out: Path) -> RerankerModel:
    log: list[dict] = []
    lam = cfg.lam if cfg.toggles.cci else 0.0
    model = train_reranker(samples, LossConfig(lam), epochs=cfg.rr_epochs, batch=cfg.batch, lr=cfg.lr_rr,
                           seed=cfg.seed, d_r=cfg.d_r, hidden=cfg.rr_hidden, log=log,
                           optimizer=cfg.rr_optimizer)
    model.save(out / RR_CKPT)
    with open(out / TRAIN_LOG, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(_dump(entry) + "\n")
    return model


def _retrieval(cfg: RunConfig, kg) -> RetrievalSettings:
    index = build_index(kg) if (cfg.toggles.qp or cfg.toggles.cp) else None
    return RetrievalSettings(index=index, K_q=cfg.K_q, K_c=cfg.K_c, theta=cfg.theta)


def _all_off(t: Toggles) -> bool:
    return t.bitmap == "000000"


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(cfg: RunConfig, args) -> int:
    kg = _load_kg(cfg)
    counts = kg.counts()
    width = max(len(k) for k in counts)
    for k, v in counts.items():
        print(f"{k:<{width}}  {v:>10,}")
    extras = []
    if kg.entity_definitions:
        extras.append(f"definitions for {len(kg.entity_definitions)} entities")
    if kg.relation_templates:
        extras.append(f"templates for {len(kg.relation_templates)} relations")
    if kg.cluster_of is not None:
        extras.append(f"{int(kg.cluster_of.max()) + 1} gold clusters")
    for e in extras:
        print(e)
    if args.preset in PUBLISHED_COUNTS:
        expected = dict(zip(("entities", "relations", "train", "valid", "test"), PUBLISHED_COUNTS[args.preset]))
        diff = {k: (counts[k], v) for k, v in expected.items() if counts[k] != v}
        if diff:
            print(f"counts differ from published {args.preset} statistics: "
                  + ", ".join(f"{k} {a} != {b}" for k, (a, b) in diff.items()))
            return 1
        print(f"counts match published {args.preset} statistics")
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    kg = make_synthetic_kg(seed=cfg.seed, kind=cfg.kind)
    save_dataset(kg, args.target)
    print(_dump(kg.counts()))
    return 0


def cmd_train_kge(cfg: RunConfig, args) -> int:
    kg = _load_kg(cfg)
    out = _write_config(cfg)
    stage_train_kge(cfg, kg, out)
    print(f"wrote {out / KGE_CKPT}")
    return 0


def _load_kge(out: Path, stage: str) -> KgeModel:
    path = out / KGE_CKPT
    if not path.is_file():
        raise StageError(stage, f"missing checkpoint {path}; run train-kge first")
    return KgeModel.load(path)


def cmd_build_samples(cfg: RunConfig, args) -> int:
    kg = _load_kg(cfg)
    out = _write_config(cfg)
    samples = stage_build_samples(cfg, kg, _load_kge(out, "build-samples"), out)
    print(f"wrote {len(samples)} samples to {out / SAMPLES}")
    return 0


def cmd_train_rerank(cfg: RunConfig, args) -> int:
    kg = _load_kg(cfg)
    out = _write_config(cfg)
    path = out / SAMPLES
    if not path.is_file():
        raise StageError("train-rerank", f"missing {path}; run build-samples first")
    stage_train_rerank(cfg, load_samples(cfg, kg, path), out)
    print(f"wrote {out / RR_CKPT}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    kg = _load_kg(cfg)
    out = Path(cfg.out_dir)
    kge_model = _load_kge(out, "eval")
    reranker = None
    if not args.base and not _all_off(cfg.toggles):
        path = out / RR_CKPT
        if not path.is_file():
            raise StageError("eval", f"missing checkpoint {path}; run train-rerank first")
        reranker = RerankerModel.load(path)
    res = evaluate(kg, kge_model, reranker, cfg.toggles, cfg.K, split=args.split, retrieval=_retrieval(cfg, kg))
    name = "base" if reranker is None else cfg.toggles.label
    print(format_table([(name, res.metrics)]))
    (out / f"metrics_{args.split}.json").write_text(res.metrics.to_json() + "\n", encoding="utf-8")
    return 0


def run_pipeline(cfg: RunConfig) -> dict:
    """Train both stages and evaluate; returns the metrics written to ``metrics.json``."""
    kg = _load_kg(cfg)
    out = _write_config(cfg)
    stage = "train-kge"
    try:
        kge_model = stage_train_kge(cfg, kg, out)
        stage = "eval"
        base = evaluate(kg, kge_model, None, cfg.toggles, cfg.K)
        result = {"base": base.metrics.to_dict()}
        if _all_off(cfg.toggles):
            result["rerank"] = base.metrics.to_dict()
        else:
            stage = "build-samples"
            samples = stage_build_samples(cfg, kg, kge_model, out)
            stage = "train-rerank"
            reranker = stage_train_rerank(cfg, samples, out)
            stage = "eval"
            res = evaluate(kg, kge_model, reranker, cfg.toggles, cfg.K, retrieval=_retrieval(cfg, kg))
            result["rerank"] = res.metrics.to_dict()
            result["decode_outcomes"] = res.outcomes
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    (out / "metrics.json").write_text(_dump(result) + "\n", encoding="utf-8")
    return result


def cmd_pipeline(cfg: RunConfig, args) -> int:
    from .evaluation import RankingMetrics

    result = run_pipeline(cfg)
    rows = [("base", RankingMetrics(**result["base"])), (cfg.toggles.label, RankingMetrics(**result["rerank"]))]
    print(format_table(rows))
    return 0


def _parse_list(text: str | None, typ):
    if not text:
        return None
    return [typ(x) for x in text.split(",") if x.strip()]


def run_ablation(cfg: RunConfig, grid: list[str], lambdas: list[float] | None = None,
                 eval_Ks: list[int] | None = None, train_K: int | None = None,
                 with_base: bool = False) -> list[dict]:
    """Evaluate toggle/lambda/K combinations against a fixed first stage.

    The re-ranker is retrained only when a training-side setting changes
    (qci, cci, dp, lambda, training K).
    """
    kg = _load_kg(cfg)
    out = Path(cfg.out_dir)
    kge_model = _load_kge(out, "ablate")
    lambdas = lambdas or [cfg.lam]
    train_K = train_K or cfg.K
    eval_Ks = eval_Ks or [train_K]
    index = None
    cache: dict[tuple, RerankerModel] = {}
    samples_cache: dict[tuple, list] = {}
    rows = []
    for K in eval_Ks if with_base else ():
        base = evaluate(kg, kge_model, None, K=K)
        rows.append({"bitmap": "base", "toggles": "base", "lambda": None, "train_K": None, "eval_K": K,
                     **base.metrics.to_dict()})
    for bits in grid:
        toggles = Toggles.from_bitmap(bits, gold_first=cfg.toggles.gold_first)
        if (toggles.qp or toggles.cp) and index is None:
            index = build_index(kg)
        retrieval = RetrievalSettings(index=index, K_q=cfg.K_q, K_c=cfg.K_c, theta=cfg.theta)
        for lam in lambdas:
            key = (toggles.qci, toggles.cci, toggles.dp, lam if toggles.cci else 0.0, train_K)
            if key not in cache:
                skey = (toggles.qci, toggles.dp, train_K)
                if skey not in samples_cache:
                    samples_cache[skey] = build_training_samples(kg, kge_model, train_K, cfg.seed, qci=toggles.qci,
                                                                 dp=toggles.dp, gold_first=toggles.gold_first)
                cache[key] = train_reranker(samples_cache[skey], LossConfig(key[3]), epochs=cfg.rr_epochs,
                                            batch=cfg.batch, lr=cfg.lr_rr, seed=cfg.seed, d_r=cfg.d_r,
                                            hidden=cfg.rr_hidden, optimizer=cfg.rr_optimizer)
            for K in eval_Ks:
                res = evaluate(kg, kge_model, cache[key], toggles, K, retrieval=retrieval)
                rows.append({"bitmap": toggles.bitmap, "toggles": toggles.label, "lambda": lam,
                             "train_K": train_K, "eval_K": K, **res.metrics.to_dict()})
    return rows


def cmd_ablate(cfg: RunConfig, args) -> int:
    grid = args.grid.split(",") if args.grid else [cfg.toggles.bitmap]
    lambdas = _parse_list(args.lambdas, float)
    if args.lambda_sweep:
        lambdas = list(LAMBDA_GRID)
    rows = run_ablation(cfg, grid, lambdas, _parse_list(args.eval_K, int), args.train_K, args.with_base)
    out = Path(cfg.out_dir)
    with open(out / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(_dump(row) + "\n")
    print(f"{'toggles':<28}{'lambda':>8}{'K':>6}{'MRR':>8}{'Hits@1':>8}{'Hits@10':>8}")
    for r in rows:
        lam = "-" if r["lambda"] is None else f"{r['lambda']:.1f}"
        print(f"{r['toggles']:<28}{lam:>8}{r['eval_K']:>6}{r['mrr']:>8.4f}{r['hits1']:>8.4f}{r['hits10']:>8.4f}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train-kge": cmd_train_kge,
    "build-samples": cmd_build_samples,
    "train-rerank": cmd_train_rerank,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgrerank", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name == "synth":
            p.add_argument("target", help="directory to write the dataset into")
        if name == "eval":
            p.add_argument("--split", default="test", choices=("valid", "test"))
            p.add_argument("--base", action="store_true", help="first stage only")
        if name == "ablate":
            p.add_argument("--grid", help="comma-separated toggle bitmaps")
            p.add_argument("--lambdas", help="comma-separated loss weights")
            p.add_argument("--lambda-sweep", action="store_true", help="use 0,0.1,0.3,0.5,0.7,0.9,1.0")
            p.add_argument("--eval-K", dest="eval_K", help="comma-separated evaluation depths")
            p.add_argument("--train-K", dest="train_K", type=int, help="training depth")
            p.add_argument("--with-base", action="store_true", help="add first-stage rows")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"[config] error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"[{exc.stage}] error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"[{args.command}] error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
