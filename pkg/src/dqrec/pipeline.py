"""Stage orchestration: prepare, pretrain, quantize, index, train, eval.

Each stage writes into ``<run_dir>/<stage>/`` and finishes by writing
``<stage>.done`` holding the config fingerprint of that stage and all of its
upstream stages. A stage whose done-file matches the current config is
skipped on rerun; a mismatch reruns it and, through the fingerprint chain,
everything downstream.
"""

from __future__ import annotations

import csv
import logging
import os
import shutil
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import build_neighbor_cache, build_rep_store, load_neighbor_cache, save_neighbor_cache
from .config import STAGES, RunConfig, save_config
from .data import (SplitDataset, binarize, build_sequences, load_attributes, load_interactions, load_split,
                   save_split, split_chronological)
from .metrics import evaluate, popularity_scorer, user_positives
from .pretrain import KINDS, PretrainModel, RepresentationMatrix, build_schema, export_representations, other
from .pretrain import pretrain as pretrain_towers
from .quantizer import QuantizerModel, fit_quantizer, quantization_losses
from .recommender import Context, Flags, RecModel, TrainConfig, TrainingDiverged, make_scorer
from .recommender import train as train_recommender
from .synthetic import planted_clusters, write_planted

ARTIFACT_ENV = "DQREC_ARTIFACT_ROOT"

log = logging.getLogger("dqrec.pipeline")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def artifact_root(override=None) -> Path:
    return Path(override or os.environ.get(ARTIFACT_ENV) or "artifacts")


def write_csv(path, rows: list[dict], fieldnames=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
        for r in rows[1:]:
            fieldnames += [k for k in r if k not in fieldnames]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def stage_dir(run_dir, stage: str) -> Path:
    return Path(run_dir) / stage


def _done_file(run_dir, stage) -> Path:
    return Path(run_dir) / f"{stage}.done"


def stage_done(run_dir, stage: str, config: RunConfig) -> bool:
    f = _done_file(run_dir, stage)
    return f.exists() and f.read_text().strip() == config.stage_fingerprint(stage)


def _mark_done(run_dir, stage, config) -> None:
    _done_file(run_dir, stage).write_text(config.stage_fingerprint(stage) + "\n")


def _require_upstream(run_dir, stage: str, config: RunConfig) -> None:
    for up in STAGES[:STAGES.index(stage)]:
        if not _done_file(run_dir, up).exists():
            raise StageError(stage, f"upstream stage '{up}' has no artifact under {run_dir}; run '{up}' first")
        if not stage_done(run_dir, up, config):
            raise StageError(stage, f"upstream stage '{up}' was produced with a different config; rerun '{up}'")


def _rng(config: RunConfig, stage: str) -> np.random.Generator:
    return np.random.default_rng([config.seed, STAGES.index(stage)])


def _begin(run_dir, stage, config) -> Path:
    _require_upstream(run_dir, stage, config)
    _done_file(run_dir, stage).unlink(missing_ok=True)
    d = stage_dir(run_dir, stage)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    return d


# ---------------------------------------------------------------- prepare

def _write_attributes(path, names, codes, vocab, ids) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + list(names))
        for k, e in enumerate(ids):
            w.writerow([e] + [vocab[f][c - 1] if c else "" for f, c in enumerate(codes[k])])


def run_prepare(config: RunConfig, run_dir) -> SplitDataset:
    d = _begin(run_dir, "prepare", config)
    slog = logging.getLogger("dqrec.prepare")
    item_attr_path, user_attr_path, attr_delim = config.item_attributes, config.user_attributes, config.delimiter
    if config.synthetic:
        data = planted_clusters(config.synth_users, config.synth_items, config.synth_groups, config.synth_p_in,
                                config.synth_p_out, config.synth_genre_noise, config.synth_release_span,
                                seed=config.seed)
        ratings_path, item_attr_path = write_planted(data, d / "raw")
        shutil.copy(d / "raw" / "groups.csv", d / "groups.csv")
        raw = load_interactions(ratings_path)
        attr_delim = ","
    else:
        raw = load_interactions(config.dataset, config.delimiter, config.header)
    log_ = binarize(raw, config.rating_threshold)
    split = split_chronological(log_)
    save_split(split, d)
    for kind, path in (("item", item_attr_path), ("user", user_attr_path)):
        if path:
            ids = split.train.item_ids if kind == "item" else split.train.user_ids
            names, codes, vocab = load_attributes(path, ids, attr_delim)
            _write_attributes(d / f"{kind}_attributes.csv", names, codes, vocab, ids)
    write_csv(d / "stats.csv", [{
        "users": split.user_count, "items": split.item_count, "raw_interactions": len(raw),
        "positives": len(log_), "train": len(split.train), "valid": len(split.valid), "test": len(split.test)}])
    slog.info("%d users, %d items, %d/%d/%d train/valid/test positives", split.user_count, split.item_count,
              len(split.train), len(split.valid), len(split.test))
    _mark_done(run_dir, "prepare", config)
    return split


def _attributes(run_dir, split: SplitDataset):
    out = {}
    for kind in KINDS:
        p = stage_dir(run_dir, "prepare") / f"{kind}_attributes.csv"
        ids = split.train.item_ids if kind == "item" else split.train.user_ids
        out[kind] = load_attributes(p, ids) if p.exists() else None
    return out


# ---------------------------------------------------------------- pretrain

def _feature_names(run_dir) -> dict[str, list[str]]:
    names = {k: [] for k in KINDS}
    for row in read_csv(stage_dir(run_dir, "pretrain") / "features.csv"):
        names[row["kind"]].append(row["family"])
    return names


def run_pretrain(config: RunConfig, run_dir) -> PretrainModel:
    d = _begin(run_dir, "pretrain", config)
    split = load_split(stage_dir(run_dir, "prepare"))
    seqs = build_sequences(split.train, config.max_seq_len)
    attrs = _attributes(run_dir, split)
    schema = build_schema(split.train, attrs["item"], attrs["user"])
    model = pretrain_towers(split, schema, seqs, _rng(config, "pretrain"), epochs=config.pretrain_epochs,
                            batch_size=config.pretrain_batch_size, lr=config.pretrain_lr,
                            patience=config.pretrain_patience, feature_dim=config.feature_dim,
                            hidden=config.hidden, out_dim=config.dim)
    model.save(d / "towers.dqv1")
    write_csv(d / "features.csv", [{"kind": k, "family": f} for k in KINDS for f in schema.names[k]],
              ["kind", "family"])
    for kind in KINDS:
        reps = export_representations(model, seqs, kind)
        ids = split.train.user_ids if kind == "user" else split.train.item_ids
        reps.save(d / f"{kind}_reps.dqv1", ids)
    _mark_done(run_dir, "pretrain", config)
    return model


# ---------------------------------------------------------------- quantize

def run_quantize(config: RunConfig, run_dir) -> dict[str, QuantizerModel]:
    d = _begin(run_dir, "quantize", config)
    qlog = logging.getLogger("dqrec.quantize")
    rng = _rng(config, "quantize")
    rows, models = [], {}
    for kind in KINDS:
        reps = RepresentationMatrix.load(stage_dir(run_dir, "pretrain") / f"{kind}_reps.dqv1", kind)
        q = fit_quantizer(reps.Z, config.layers, config.codebook_size, config.beta, kind,
                          epochs=config.quantizer_epochs, batch_size=config.quantizer_batch_size,
                          lr=config.quantizer_lr, rng=rng, n_init=config.quantizer_n_init)
        q.save(d / f"{kind}_quantizer.dqv1")
        rec, com, total = quantization_losses(reps.Z, q)
        used = len({tuple(c) for c in q.semantic_ids(reps.Z).tolist()})
        rows.append({"kind": kind, "rows": len(reps.Z), "layers": config.layers,
                     "codebook_size": config.codebook_size, "rec_loss": float(rec.mean()),
                     "commit_loss": float(com.mean()), "total_loss": float(total.mean()),
                     "distinct_ids": used})
        qlog.info("%s: L_R=%.6f L_C=%.6f distinct ids %d/%d", kind, rows[-1]["rec_loss"],
                  rows[-1]["commit_loss"], used, len(reps.Z))
        models[kind] = q
    write_csv(d / "quant_report.csv", rows)
    _mark_done(run_dir, "quantize", config)
    return models


def load_quantizers(run_dir) -> dict[str, QuantizerModel]:
    return {k: QuantizerModel.load(stage_dir(run_dir, "quantize") / f"{k}_quantizer.dqv1") for k in KINDS}


# ---------------------------------------------------------------- index

def run_index(config: RunConfig, run_dir):
    d = _begin(run_dir, "index", config)
    split = load_split(stage_dir(run_dir, "prepare"))
    quantizers = load_quantizers(run_dir)
    for kind in KINDS:
        reps = RepresentationMatrix.load(stage_dir(run_dir, "pretrain") / f"{kind}_reps.dqv1", kind)
        store = build_rep_store(reps, quantizers[kind])
        cache = build_neighbor_cache(store, quantizers[kind], config.neighbors, config.latent_neighbors)
        ids = split.train.user_ids if kind == "user" else split.train.item_ids
        save_neighbor_cache(cache, d / f"{kind}_neighbors.csv", ids)
        write_csv(d / f"{kind}_semantic_ids.csv",
                  [{"entity": ids[e]} | {f"code_{l}": int(c) for l, c in enumerate(store.codes[r])}
                   for r, e in enumerate(store.entities)],
                  ["entity"] + [f"code_{l}" for l in range(config.layers)])
        logging.getLogger("dqrec.index").info("%s: %d entities indexed", kind, len(store))
    _mark_done(run_dir, "index", config)


# ---------------------------------------------------------------- train / eval

@dataclass
class Loaded:
    split: SplitDataset
    context: Context


def load_context(config: RunConfig, run_dir) -> Loaded:
    split = load_split(stage_dir(run_dir, "prepare"))
    seqs = build_sequences(split.train, config.max_seq_len)
    towers = PretrainModel.load(stage_dir(run_dir, "pretrain") / "towers.dqv1", _feature_names(run_dir))
    quantizers = load_quantizers(run_dir)
    caches = {}
    for kind in KINDS:
        ids = split.train.user_ids if kind == "user" else split.train.item_ids
        caches[kind] = load_neighbor_cache(stage_dir(run_dir, "index") / f"{kind}_neighbors.csv", ids,
                                           config.layers)
    return Loaded(split, Context(seqs, towers, quantizers, caches, config.semantic_history == "causal"))


def flags_of(config: RunConfig) -> Flags:
    return Flags(config.user_feature, config.item_feature, config.user_linkage, config.item_linkage,
                 config.latent_linkage)


def run_train(config: RunConfig, run_dir) -> RecModel:
    d = _begin(run_dir, "train", config)
    loaded = load_context(config, run_dir)
    split = loaded.split
    rng = _rng(config, "train")
    model = RecModel.init(split.user_count, split.item_count, config.layers, config.codebook_size, rng,
                          dim=config.dim, sem_dim=config.semantic_dim, hidden=config.hidden,
                          flags=flags_of(config))
    tc = TrainConfig(config.epochs, config.batch_size, config.lr, config.patience, config.eval_batch_size)
    try:
        model, history = train_recommender(model, split, loaded.context, tc, rng)
    except TrainingDiverged as exc:
        RecModel(exc.last_good, model.n_layers, model.flags).save(d / "last_good.dqv1")
        raise StageError("train", f"{exc}; last finite parameters saved to {d / 'last_good.dqv1'}") from exc
    model.save(d / "model.dqv1")
    write_csv(d / "history.csv", history)
    _mark_done(run_dir, "train", config)
    return model


def run_eval(config: RunConfig, run_dir) -> list[dict]:
    d = _begin(run_dir, "eval", config)
    loaded = load_context(config, run_dir)
    split = loaded.split
    model = RecModel.load(stage_dir(run_dir, "train") / "model.dqv1")
    known = user_positives(split.train, split.valid, split.test)
    fp = config.stage_fingerprint("eval")
    reports = {
        "dqrec": evaluate(make_scorer(model, loaded.context), split.test, known, config.eval_batch_size,
                          config.ks, fp),
        "popularity": evaluate(popularity_scorer(split.train), split.test, known, config.eval_batch_size,
                               config.ks, fp),
    }
    rows = [{"model": name} | rep.row() | {"fingerprint": fp} for name, rep in reports.items()]
    write_csv(d / "metrics.csv", rows)
    # timings live apart so the metrics file is reproducible byte for byte
    write_csv(d / "timing.csv", [{"model": n, "seconds": round(r.seconds, 3)} for n, r in reports.items()])
    for row in rows:
        logging.getLogger("dqrec.eval").info("%s recall@%d=%.4f", row["model"], config.ks[0],
                                             row[f"recall@{config.ks[0]}"])
    _mark_done(run_dir, "eval", config)
    return rows


RUNNERS = {"prepare": run_prepare, "pretrain": run_pretrain, "quantize": run_quantize, "index": run_index,
           "train": run_train, "eval": run_eval}


def run_stage(config: RunConfig, run_dir, stage: str):
    if stage not in RUNNERS:
        raise ValueError(f"unknown stage {stage!r}")
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    return RUNNERS[stage](config, run_dir)


def read_metrics(run_dir) -> dict[str, dict]:
    return {r["model"]: r for r in read_csv(stage_dir(run_dir, "eval") / "metrics.csv")}


def run_pipeline(config: RunConfig, run_dir, stop_after: str = "eval", force: bool = False) -> dict[str, dict]:
    """Run every stage up to ``stop_after``, skipping stages already done for this config.

    Returns the rows of ``eval/metrics.csv`` keyed by model name (empty when
    stopping before eval).
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.txt")
    for stage in STAGES[:STAGES.index(stop_after) + 1]:
        if not force and stage_done(run_dir, stage, config):
            log.info("%s: up to date, skipped", stage)
            continue
        log.info("%s: running", stage)
        RUNNERS[stage](config, run_dir)
        force = True  # everything downstream of a rerun stage reruns as well
    return read_metrics(run_dir) if stop_after == "eval" else {}


def seed_from(base_config: RunConfig, base_dir, config: RunConfig, run_dir) -> list[str]:
    """Copy the completed stages of ``base_dir`` that ``config`` would reproduce unchanged."""
    copied = []
    for stage in STAGES:
        if not (stage_done(base_dir, stage, base_config)
                and base_config.stage_fingerprint(stage) == config.stage_fingerprint(stage)):
            break
        target = stage_dir(run_dir, stage)
        if target.exists():
            shutil.rmtree(target)
        shutil.copytree(stage_dir(base_dir, stage), target)
        shutil.copy(_done_file(base_dir, stage), _done_file(run_dir, stage))
        copied.append(stage)
    return copied


# ---------------------------------------------------------------- ablations

ABLATIONS = {
    "full": {},
    "no_feature": {"user_feature": False, "item_feature": False},
    "no_linkage": {"user_linkage": False, "item_linkage": False, "latent_linkage": False},
    "no_latent": {"latent_linkage": False},
    "all_off": {"user_feature": False, "item_feature": False, "user_linkage": False, "item_linkage": False,
                "latent_linkage": False},
}


def ablation_study(config: RunConfig, root, variants=("full", "no_feature", "no_linkage", "all_off")) -> list[dict]:
    """Train each flag variant on shared upstream artifacts; one metrics row per variant.

    A final ``popularity`` row comes from the first variant's eval stage.
    """
    root = Path(root)
    base = config.replace(**ABLATIONS[variants[0]])
    base_dir = root / variants[0]
    rows = []
    for name in variants:
        cfg = config.replace(**ABLATIONS[name])
        run_dir = root / name
        if name != variants[0]:
            run_dir.mkdir(parents=True, exist_ok=True)
            seed_from(base, base_dir, cfg, run_dir)
        metrics = run_pipeline(cfg, run_dir)
        rows.append({"variant": name, "seed": config.seed} | _metric_values(metrics["dqrec"]))
        if name == variants[0]:
            popularity = {"variant": "popularity", "seed": config.seed} | _metric_values(metrics["popularity"])
    rows.append(popularity)
    return rows


def _metric_values(row: dict) -> dict:
    return {k: float(v) for k, v in row.items() if k.startswith(("recall@", "ndcg@"))}


# ---------------------------------------------------------------- sweep

SWEEP_AXES = {"K": ("neighbors", "index"), "J": ("codebook_size", "quantize"), "L": ("layers", "quantize")}


def sweep(config: RunConfig, axis: str, values, root) -> list[dict]:
    """Rerun the pipeline per axis value, reusing the unaffected upstream stages.

    A value that fails validation or crashes a stage yields a row with
    ``status=failed`` and the error text; the sweep moves on.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    field_name, first = SWEEP_AXES[axis]
    root = Path(root)
    base_dir = root / "base"
    run_pipeline(config, base_dir, stop_after=STAGES[STAGES.index(first) - 1])
    rows = []
    for v in values:
        row = {"axis": axis, "value": v, "status": "ok", "error": ""}
        try:
            cfg = config.replace(**{field_name: int(v)})
            run_dir = root / f"{axis}_{v}"
            run_dir.mkdir(parents=True, exist_ok=True)
            seed_from(config, base_dir, cfg, run_dir)
            metrics = run_pipeline(cfg, run_dir)
            for q in read_csv(stage_dir(run_dir, "quantize") / "quant_report.csv"):
                row[f"quant_error_{q['kind']}"] = q["rec_loss"]
            row |= {k: m for k, m in metrics["dqrec"].items() if k.startswith(("recall@", "ndcg@"))}
        except Exception as exc:  # one bad value must not end the sweep
            logging.getLogger("dqrec.sweep").warning("%s=%s failed: %s", axis, v, exc)
            row |= {"status": "failed", "error": str(exc)}
        rows.append(row)
    fields = ["axis", "value", "status", "quant_error_user", "quant_error_item"]
    fields += [f"recall@{k}" for k in config.ks] + [f"ndcg@{k}" for k in config.ks] + ["error"]
    write_csv(root / f"sweep_{axis}.csv", rows, fields)
    return rows


# ---------------------------------------------------------------- inspect

def _ids_of(split: SplitDataset, kind: str):
    return split.train.user_ids if kind == "user" else split.train.item_ids


def codeword_overlap(a, b) -> int:
    """Number of layers on which two semantic ids agree."""
    return int(np.sum(np.asarray(a) == np.asarray(b)))


def cluster_overlap(codes: np.ndarray, groups: np.ndarray) -> tuple[float, float]:
    """Mean fraction of shared codewords within and across planted groups."""
    codes, groups = np.asarray(codes), np.asarray(groups)
    share = (codes[:, None, :] == codes[None, :, :]).mean(axis=-1)
    same = groups[:, None] == groups[None, :]
    off_diag = ~np.eye(len(groups), dtype=bool)
    return float(share[same & off_diag].mean()), float(share[~same].mean())


def read_groups(run_dir, kind: str, ids) -> np.ndarray:
    table = {r["entity"]: int(r["group"]) for r in read_csv(stage_dir(run_dir, "prepare") / "groups.csv")
             if r["kind"] == kind}
    return np.array([table[e] for e in ids])


def inspect_ids(config: RunConfig, run_dir, kind: str, external_ids) -> list[dict]:
    """Long-format rows describing the semantic ids of the given entities.

    Sections: ``semantic_id`` (one row per layer), ``history`` (category
    counts over the entity's train history) and, for two or more entities,
    ``pair`` rows with codeword overlap and quantized distance.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be user or item, got {kind!r}")
    for stage in STAGES[:STAGES.index("index") + 1]:
        if not _done_file(run_dir, stage).exists():
            raise StageError("inspect", f"stage '{stage}' has no artifact under {run_dir}")
    loaded = load_context(config, run_dir)
    split, ctx = loaded.split, loaded.context
    index = {e: k for k, e in enumerate(_ids_of(split, kind))}
    missing = [e for e in external_ids if e not in index]
    if missing:
        raise KeyError(f"unknown {kind} id(s): {', '.join(map(str, missing))}")
    ents = np.array([index[e] for e in external_ids], dtype=np.int64)
    codes = ctx.semantic_ids(kind, ents)
    z_hat = ctx.quantizers[kind].decode(codes)
    attrs = _attributes(run_dir, split)[other(kind)]
    rows = []
    for ext, e, code in zip(external_ids, ents, codes):
        for l, c in enumerate(code):
            rows.append({"section": "semantic_id", "entity": ext, "other": "", "key": f"layer_{l}",
                         "value": int(c)})
        hist = ctx.seqs.history(kind, int(e))[0]
        if attrs is not None:
            names, acodes, vocab = attrs
            cats = [vocab[0][c - 1] if c else "unknown" for c in acodes[hist, 0]]
        else:
            cats = [f"c{c}" for c in ctx.semantic_ids(other(kind), hist)[:, 0]] if len(hist) else []
        for cat, n in sorted(Counter(cats).items()):
            rows.append({"section": "history", "entity": ext, "other": "", "key": cat, "value": n})
    for a in range(len(ents)):
        for b in range(a + 1, len(ents)):
            pair = {"section": "pair", "entity": external_ids[a], "other": external_ids[b]}
            rows.append(pair | {"key": "overlap", "value": codeword_overlap(codes[a], codes[b])})
            rows.append(pair | {"key": "distance", "value": float(((z_hat[a] - z_hat[b]) ** 2).sum())})
    return rows

