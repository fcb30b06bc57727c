"""Stage functions over a work directory; the CLI is a thin layer over these.

Every artifact is written through a temp file and an atomic rename, so an
interrupted stage never leaves a half-written output behind.
"""

from __future__ import annotations

import csv
import io
import shutil
from pathlib import Path

import numpy as np

from .config import RunConfig
from .corpus import Vocab, build_vocab, generate_synthetic_tg
from .encoder import EncoderModel, load_encoder, pretrain_mlm, save_encoder
from .errors import DependencyError, NumericError
from .evaluation import EnsembleSpec, EvalReport, accuracy, ensemble, project_2d, projection_csv
from .gnn import load_gnn, predict, save_gnn, train_gnn
from .io import atomic_write_bytes, atomic_write_text, load_graph, save_graph
from .rng import RngState
from .stage1 import (ClsHead, LinkHead, bow_features, cache_read, cache_write, config_hash,
                     extract_embeddings, finetune_cls, finetune_link)

SOURCE_FILES = {
    "bow": "features_bow.stgx",
    "fixed": "features_fixed.stgx",
    "finetuned": "features_finetuned.stgx",
    "finetuned-full": "features_finetuned_full.stgx",
}


def derive_seed(seed: int, name: str) -> int:
    """Seed of the named substream (data, lm, gnn, eval) of the global seed."""
    return RngState(seed).spawn(name).seed


def require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"required artifact {path} does not exist")
    return path


def _check_finite(name: str, X: np.ndarray):
    if not np.isfinite(X).all():
        raise NumericError(f"{name} contains non-finite values")


# data -----------------------------------------------------------------------

def gen_data(cfg: RunConfig, data_dir) -> dict:
    """Generate (or ingest from ``data.input_dir``) a graph and its training vocabulary."""
    data_dir = Path(data_dir)
    if cfg.data.input_dir:
        graph = load_graph(cfg.data.input_dir)
        if Path(cfg.data.input_dir).resolve() != data_dir.resolve():
            save_graph(graph, data_dir)
    else:
        graph = generate_synthetic_tg(cfg.data.synthetic(derive_seed(cfg.seed, "data")))
        save_graph(graph, data_dir)
    train = graph.splits["train"] if graph.splits else np.arange(graph.num_nodes)
    vocab = build_vocab([graph.texts[i] for i in train], cfg.data.min_freq)
    vocab.save(data_dir / "vocab.txt")
    return {"data": data_dir, "vocab": data_dir / "vocab.txt"}


def load_data(data_dir):
    data_dir = Path(data_dir)
    graph = load_graph(data_dir)
    vocab = Vocab.load(require(data_dir / "vocab.txt"))
    return graph, vocab


# stage one ---------------------------------------------------------------------

def pretrain(cfg: RunConfig, data_dir, out) -> Path:
    graph, vocab = load_data(data_dir)
    seed = derive_seed(cfg.seed, "lm")
    model = EncoderModel(cfg.encoder.encoder(vocab.size, seed))
    losses = pretrain_mlm(model, graph, vocab, steps=cfg.encoder.mlm_steps,
                          batch_size=cfg.encoder.mlm_batch_size, mask_rate=cfg.encoder.mask_rate,
                          learning_rate=cfg.encoder.mlm_learning_rate, seed=seed)
    if losses and not np.isfinite(losses).all():
        raise NumericError("masked-LM loss diverged")
    save_encoder(out, model)
    return Path(out)


def finetune(cfg: RunConfig, data_dir, ckpt, out, history_out=None, peft: str | None = None,
             lm_seed: int | None = None, verbose: bool = False):
    """Finetune a pretrained encoder checkpoint; returns the stage result."""
    graph, vocab = load_data(data_dir)
    model = load_encoder(require(ckpt))
    seed = derive_seed(cfg.seed, "lm") if lm_seed is None else lm_seed
    cfg.stage1.peft = peft or cfg.stage1.peft
    s1 = cfg.stage1.stage1(cfg.lora, seed, model.cfg.max_len)
    head_rng = RngState(seed).spawn("head")
    d = model.cfg.d_model
    if cfg.stage1.task == "link":
        result = finetune_link(graph, model, LinkHead(d, s1.link_hidden, s1.header_dropout, head_rng),
                               s1, vocab, verbose)
    else:
        result = finetune_cls(graph, model, ClsHead(d, graph.num_classes, s1.header_dropout, head_rng),
                              s1, vocab, verbose)
    if not all(np.isfinite(row["loss"]) for row in result.history):
        raise NumericError("finetuning loss diverged")
    save_encoder(out, result.model)
    if history_out is not None:
        atomic_write_text(history_out, rows_csv(result.history))
    return result


def embed(cfg: RunConfig, data_dir, ckpt, out, provenance: str = "finetuned") -> Path:
    graph, vocab = load_data(data_dir)
    model = load_encoder(require(ckpt))
    fm = extract_embeddings(graph, model, vocab, provenance=provenance,
                            cfg_hash=config_hash(Path(ckpt).read_bytes().hex(), provenance))
    _check_finite("embedding matrix", fm.X)
    cache_write(out, fm)
    return Path(out)


def bow(cfg: RunConfig, data_dir, out) -> Path:
    graph, vocab = load_data(data_dir)
    cache_write(out, bow_features(graph, vocab, cfg.data.bow_dim))
    return Path(out)


# stage two ----------------------------------------------------------------------

def train_stage2(cfg: RunConfig, data_dir, features, arch: str, out_prefix, name: str | None = None,
                 gnn_seed: int | None = None, verbose: bool = False):
    """Train one GNN; writes ``<prefix>.stgg``, ``<prefix>.report.txt`` and ``<prefix>.pred.npy``.

    Returns ``(report, result)``.
    """
    graph, _ = load_data(data_dir)
    fm = cache_read(require(features))
    seed = derive_seed(cfg.seed, "gnn") if gnn_seed is None else gnn_seed
    task = cfg.gnn.task
    gcfg = cfg.gnn.gnn(seed, arch)
    result = train_gnn(graph, fm, gcfg, task, verbose=verbose)
    if not all(np.isfinite(row["loss"]) for row in result.history):
        raise NumericError("GNN training loss diverged")
    prefix = Path(out_prefix)
    save_gnn(prefix.with_suffix(".stgg"), result.model)

    report = EvalReport(task, name or f"{arch}-{fm.provenance}", result.metric,
                        config_hash=fm.config_hash.hex(),
                        num_eval_negatives=graph.edge_splits.num_eval_negatives if task == "link" else 0)
    values = {k: v for k, v in result.best.items() if k not in ("epoch", "loss")}
    values["epochs_to_95"] = result.epochs_to_95
    report.add_run(cfg.seed, values)
    atomic_write_text(prefix.with_suffix(".report.txt"), report.to_text())

    if task == "nodecls":
        out = predict(result.model, graph, fm)
    else:
        es = graph.edge_splits
        out = np.concatenate([predict(result.model, graph, fm, es.valid),
                              predict(result.model, graph, fm, es.test)])
    save_array(prefix.with_suffix(".pred.npy"), out)
    return report, result


def save_array(path, X: np.ndarray):
    buf = io.BytesIO()
    np.save(buf, X, allow_pickle=False)
    atomic_write_bytes(path, buf.getvalue())


def load_array(path) -> np.ndarray:
    return np.load(require(path), allow_pickle=False)


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def load_report(path) -> EvalReport:
    return EvalReport.from_text(require(path).read_text(encoding="utf-8"))


def comparison_rows(reports: dict, sota: str = "sage", split: str = "test") -> list[dict]:
    """One row per feature source: each arch's metric plus the two comparison deltas.

    ``reports`` maps ``(source, arch)`` to an ``EvalReport``.
    """
    from .evaluation import compare_report

    sources = list(dict.fromkeys(s for s, _ in reports))
    archs = list(dict.fromkeys(a for _, a in reports))
    rows = []
    for src in sources:
        metric = next(r.metric for (s, _), r in reports.items() if s == src)
        row = {"source": src, "metric": f"{split}_{metric}"}
        for a in archs:
            if (src, a) in reports:
                row[a] = reports[(src, a)].mean(f"{split}_{metric}")
        by_arch = {a: reports[(src, a)] for a in archs if (src, a) in reports}
        if sota in by_arch and "mlp" in by_arch and "sage" in by_arch:
            cmp = compare_report(by_arch, sota, "mlp", "sage", split)
            row["delta_mlp"] = cmp["delta_mlp"]
            row["delta_gnn"] = cmp["delta_gnn"]
        rows.append(row)
    return rows


def comparison_csv(rows: list[dict]) -> str:
    fields = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def run_ensemble(data_dir, preds, weights=None, split: str = "valid") -> dict:
    """Accuracy of each member and of their weighted average on ``split``."""
    graph, _ = load_data(data_dir)
    members = [load_array(p) for p in preds]
    spec = EnsembleSpec([str(p) for p in preds], list(weights) if weights else None)
    combined = ensemble(members, spec)
    nodes = graph.splits[split]
    y = graph.labels[nodes]
    return {
        "members": [accuracy(m[nodes].argmax(axis=1), y) for m in members],
        "ensemble": accuracy(combined[nodes].argmax(axis=1), y),
        "probabilities": combined,
    }


def project(data_dir, features, out, per_class: int = 100, seed: int = 0) -> Path:
    graph, _ = load_data(data_dir)
    fm = cache_read(require(features))
    coords, labels, _ = project_2d(fm.X, graph.labels, per_class, seed=derive_seed(seed, "eval"))
    atomic_write_text(out, projection_csv(coords, labels))
    return Path(out)


def pipeline(cfg: RunConfig, workdir, verbose: bool = False, log=print) -> dict:
    """gen-data, pretrain, fixed embedding, finetune, embed, GNNs per source, comparison table."""
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    manifest = {}

    def emit(key, path):
        manifest[key] = Path(path)
        log(f"{key}: {path}")

    for key, path in gen_data(cfg, data).items():
        emit(key, path)
    sources = list(cfg.eval.sources)
    if "bow" in sources:
        emit("features_bow", bow(cfg, data, work / SOURCE_FILES["bow"]))
    needs_lm = any(s != "bow" for s in sources)
    if needs_lm:
        emit("encoder_pretrained", pretrain(cfg, data, work / "encoder_pretrained.stgm"))
    if "fixed" in sources:
        emit("features_fixed", embed(cfg, data, work / "encoder_pretrained.stgm",
                                     work / SOURCE_FILES["fixed"], "fixed"))
    for src, peft in (("finetuned", "lora"), ("finetuned-full", "full")):
        if src not in sources:
            continue
        stem = "encoder_finetuned" if peft == "lora" else "encoder_finetuned_full"
        finetune(cfg, data, work / "encoder_pretrained.stgm", work / f"{stem}.stgm",
                 work / f"{stem}.history.csv", peft=peft, verbose=verbose)
        emit(stem, work / f"{stem}.stgm")
        emit(f"features_{src}", embed(cfg, data, work / f"{stem}.stgm", work / SOURCE_FILES[src], src))

    archs = list(dict.fromkeys(list(cfg.gnn.archs) + [cfg.eval.sota]))
    reports = {}
    for src in sources:
        for arch in archs:
            prefix = work / f"gnn_{src}_{arch}"
            report, _ = train_stage2(cfg, data, work / SOURCE_FILES[src], arch, prefix,
                                     name=f"{arch}-{src}", verbose=verbose)
            reports[(src, arch)] = report
            emit(f"report_{src}_{arch}", prefix.with_suffix(".report.txt"))
    table = comparison_csv(comparison_rows(reports, cfg.eval.sota))
    atomic_write_text(work / "comparison.csv", table)
    emit("comparison", work / "comparison.csv")
    return manifest


def clean(workdir):
    shutil.rmtree(workdir, ignore_errors=True)


def run_stage_search(cfg: RunConfig, data_dir, out, features=None, ckpt=None, verbose: bool = False):
    """Random search for the finetuning (``lm``) or GNN stage; writes the trial log CSV."""
    import copy

    from .encoder import load_encoder as _load
    from .hpo import SearchSpace, apply_gnn_params, apply_lm_params, run_search, trial_log_csv

    stage = cfg.hpo.stage
    graph, vocab = load_data(data_dir)
    if stage == "lm":
        task = cfg.stage1.task
        space = SearchSpace.lm(task)
        base_model = _load(require(ckpt or Path(data_dir).parent / "encoder_pretrained.stgm"))
        seed = derive_seed(cfg.seed, "lm")
        base = cfg.stage1.stage1(cfg.lora, seed, base_model.cfg.max_len)

        def objective(params):
            s1 = apply_lm_params(base, params)
            model = copy.deepcopy(base_model)
            head_rng = RngState(seed).spawn("head")
            d = model.cfg.d_model
            if task == "link":
                head = LinkHead(d, s1.link_hidden, s1.header_dropout, head_rng)
                return finetune_link(graph, model, head, s1, vocab, verbose).best["valid_mrr"]
            head = ClsHead(d, graph.num_classes, s1.header_dropout, head_rng)
            return finetune_cls(graph, model, head, s1, vocab, verbose).best["valid_acc"]
    else:
        task = cfg.gnn.task
        space = SearchSpace.gnn(task)
        fm = cache_read(require(features or Path(data_dir).parent / SOURCE_FILES[cfg.hpo.source]))
        base = cfg.gnn.gnn(derive_seed(cfg.seed, "gnn"))
        key = "valid_mrr" if task == "link" else "valid_acc"

        def objective(params):
            return train_gnn(graph, fm, apply_gnn_params(base, params), task, verbose).best[key]

    budget = cfg.hpo.trials or space.default_budget
    result = run_search(space, budget, objective, derive_seed(cfg.seed, "hpo"))
    atomic_write_text(out, trial_log_csv(space, result))
    return result
