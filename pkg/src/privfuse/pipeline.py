"""Batch pipeline: sanitize -> embed -> align -> fuse -> eval, plus sweep and tmr.

Every stage reads the manifest the previous stage left in the output
directory (``<stage>.json``) and writes its own files under content-digest
names, ``<stem>-<sha256[:12]><ext>``. Files are first written to a temporary
name and only renamed once complete, so a failed stage leaves no partial
outputs behind.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .align import GanConfig, load_anchors, predict_anchors, save_anchors, train_mapping
from .embeddings import (
    EmbeddingTable,
    WordEmbeddingTable,
    load_embeddings,
    save_checkpoint,
    save_embeddings,
)
from .evaluation import (
    EvalReport,
    LogRegConfig,
    TreeConfig,
    attack_gender,
    attack_occupation,
    predict_interests,
    write_plot_csv,
)
from .fuse import FusionConfig, fit_fusion
from .graph import HeteroGraph, UserGraph, extract_user_graph, load_graph, save_graph, split_ids
from .hetero_embed import TrainConfig, build_node_features, fit_hetero
from .hybrid_dp import DATA_TYPES, PrivacyBudget, allocate_budgets, check_graph_budget, compute_tmr, sanitize_graph
from .rng import derive_seed
from .seq_embed import SkipGramConfig, WalkConfig, deepwalk, train_skipgram

TOOL = "privfuse"
TOOL_VERSION = "0.1.0"
NETWORKS = ("a", "b")
OUT_DIR_ENV = "PRIVFUSE_OUT_DIR"
STAGES = ("sanitize", "embed", "align", "fuse", "eval")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    graph_a: str = ""
    graph_b: str = ""
    out_dir: str = "privfuse-out"
    seed: int = 0
    deterministic: bool = True
    ablation: str = "hierarchy"
    # privacy budget
    eps_a: float = 5.0
    eps_g: float = 10.0
    eps_t: float = 7.5
    # word vectors for the text sanitizer and post features
    word_dim: int = 64
    word_window: int = 5
    word_epochs: int = 5
    # relation-aware encoder
    hetero_epochs: int = 50
    hetero_lr: float = 0.001
    negatives: int = 5
    hidden_dim: int = 256
    out_dim: int = 128
    # adversarial alignment
    gan_epochs: int = 5
    gan_iterations: int = 400
    gan_batch: int = 32
    gan_hidden: int = 512
    gan_lr_gen: float = 0.01
    gan_lr_dis: float = 0.1
    gan_beta: float = 0.01
    csls_k: int = 10
    anchor_margin: float = 0.0
    # fusion
    fusion_epochs: int = 50
    fusion_lr: float = 0.001
    hops: int = 4
    alpha: float = 2.0
    fusion_out_dim: int = 128
    # evaluation
    split_ratio: float = 0.8
    repeats: int = 5
    sweep_eps_a: tuple[float, ...] = (1.0, 5.0, 10.0, 15.0)

    PATH_KEYS = ("graph_a", "graph_b", "out_dir")

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.ablation not in ("hierarchy", "iterative"):
            raise ConfigError(f"ablation must be 'hierarchy' or 'iterative', got {self.ablation!r}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not self.sweep_eps_a or any(not v > 0 for v in self.sweep_eps_a):
            raise ConfigError("sweep_eps_a must list positive budgets")
        try:
            self.budget()
            self.gan_config()
            self.fusion_config()
            self.hetero_config()
            self.fusion_train_config()
            self.skipgram_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- parsing ----------------------------------------------------------

    @classmethod
    def fields(cls) -> dict[str, dataclasses.Field]:
        return {f.name: f for f in dataclasses.fields(cls)}

    @classmethod
    def _convert(cls, key: str, raw: str):
        fields = cls.fields()
        if key not in fields:
            raise ConfigError(f"unknown configuration key {key!r}")
        default = fields[key].default
        raw = raw.strip()
        try:
            if isinstance(default, bool):
                low = raw.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                return low in ("true", "1", "yes")
            if isinstance(default, int):
                return int(raw)
            if isinstance(default, float):
                return float(raw)
            if isinstance(default, tuple):
                return tuple(float(v) for v in raw.split(",") if v.strip())
            return raw
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None

    @classmethod
    def from_sources(cls, path: str | Path | None = None, overrides: Sequence[str] = ()) -> "PipelineConfig":
        """Flat ``key = value`` file, then ``key=value`` overrides, then the env override of out_dir."""
        values: dict = {}
        base = Path(".")
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file {path} does not exist")
            parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
            parser.optionxform = str
            try:
                parser.read_string("[pipeline]\n" + path.read_text(encoding="utf-8"), source=str(path))
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for k, v in parser["pipeline"].items():
                values[k] = cls._convert(k, v)
            base = path.parent
            # relative graph paths are resolved against the config file
            for k in ("graph_a", "graph_b"):
                if values.get(k) and not Path(values[k]).is_absolute():
                    values[k] = str(base / values[k])
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            k, v = item.split("=", 1)
            values[k.strip()] = cls._convert(k.strip(), v)
        env = os.environ.get(OUT_DIR_ENV)
        if env:
            values["out_dir"] = env
        return cls(**values)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def echo(self) -> dict:
        """Config without paths, so outputs do not depend on where they are written."""
        out = {k: getattr(self, k) for k in self.fields() if k not in self.PATH_KEYS}
        out["sweep_eps_a"] = list(self.sweep_eps_a)
        return out

    # -- module configs ---------------------------------------------------

    def budget(self) -> PrivacyBudget:
        return PrivacyBudget(self.eps_a, self.eps_g, self.eps_t)

    def skipgram_config(self, seed: int = 0) -> SkipGramConfig:
        return SkipGramConfig(dim=self.word_dim, window=self.word_window, epochs=self.word_epochs, seed=seed)

    def hetero_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.hetero_lr,
            epochs=self.hetero_epochs,
            negatives=self.negatives,
            seed=seed,
            deterministic=self.deterministic,
            hidden_dim=self.hidden_dim,
            out_dim=self.out_dim,
        )

    def gan_config(self, seed: int = 0) -> GanConfig:
        return GanConfig(
            hidden=self.gan_hidden,
            epochs=self.gan_epochs,
            iterations=self.gan_iterations,
            batch_size=self.gan_batch,
            lr_gen=self.gan_lr_gen,
            lr_dis=self.gan_lr_dis,
            beta=self.gan_beta,
            seed=seed,
        )

    def fusion_train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.fusion_lr,
            epochs=self.fusion_epochs,
            negatives=self.negatives,
            seed=seed,
            deterministic=self.deterministic,
        )

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(k=self.hops, alpha=self.alpha, out_dim=self.fusion_out_dim, mode=self.ablation)


# ---------------------------------------------------------------------------
# output directory handling


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._pending: list[Path] = []

    def path(self, name: str) -> Path:
        return self.root / name

    def emit(self, stem: str, ext: str, writer: Callable[[Path], None]) -> str:
        """Write via ``writer`` to a temp file, then rename to a digest name."""
        tmp = self.root / f".partial-{stem}{ext}"
        self._pending.append(tmp)
        writer(tmp)
        name = f"{stem}-{sha256_file(tmp)[:12]}{ext}"
        os.replace(tmp, self.root / name)
        self._pending.remove(tmp)
        return name

    def discard_partial(self) -> list[str]:
        removed = []
        for p in self._pending:
            if p.exists():
                p.unlink()
                removed.append(p.name)
        self._pending.clear()
        return removed

    def save_manifest(self, stage: str, doc: dict) -> None:
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        tmp = self.root / f".partial-{stage}.json"
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, self.root / f"{stage}.json")

    def load_manifest(self, stage: str) -> dict:
        p = self.root / f"{stage}.json"
        if not p.exists():
            raise FileNotFoundError(f"{p}: run the '{stage}' stage first")
        return json.loads(p.read_text(encoding="utf-8"))


def provenance(cfg: PipelineConfig, stage: str, inputs: dict[str, str]) -> dict:
    return {
        "tool": TOOL,
        "version": TOOL_VERSION,
        "stage": stage,
        "seed": cfg.seed,
        "budget": asdict(cfg.budget()),
        "inputs": dict(sorted(inputs.items())),
        "config": cfg.echo(),
    }


def _digests(ws: Workspace, names: Sequence[str]) -> dict[str, str]:
    return {n: sha256_file(ws.path(n)) for n in names}


# ---------------------------------------------------------------------------
# stages


def _require(path: str, key: str) -> Path:
    if not path:
        raise ConfigError(f"configuration key {key} is not set")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{key}: {p} does not exist")
    return p


def _corpus(g: HeteroGraph) -> list[list[str]]:
    return [list(t) for t in g.post_text if t]


def stage_sanitize(cfg: PipelineConfig, ws: Workspace) -> dict:
    nets = {}
    srcs = {}
    for k, net in enumerate(NETWORKS):
        src = _require(getattr(cfg, f"graph_{net}"), f"graph_{net}")
        srcs[f"graph_{net}"] = sha256_file(src)
    for k, net in enumerate(NETWORKS):
        src = Path(getattr(cfg, f"graph_{net}"))
        g = load_graph(src)
        corpus = _corpus(g)
        if not corpus:
            raise ValueError(f"{src}: no post text to train word vectors on")
        words = train_skipgram(corpus, cfg.skipgram_config(derive_seed(cfg.seed, "words", k)))
        prov = provenance(cfg, "sanitize", {f"graph_{net}": srcs[f"graph_{net}"]})
        san = sanitize_graph(g, cfg.budget(), words, derive_seed(cfg.seed, "sanitize", k))
        san.meta["provenance"] = prov
        gname = ws.emit(f"sanitized_{net}", ".jsonl", lambda p: save_graph(san, p))
        wname = ws.emit(f"words_{net}", ".txt", lambda p: save_embeddings(words, p, prov))
        side = {"provenance": prov, "sanitizer": san.meta["sanitizer"], "graph": gname}
        sname = ws.emit(
            f"sanitizer_{net}",
            ".json",
            lambda p: p.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n", encoding="utf-8"),
        )
        nets[net] = {"graph": gname, "words": wname, "sidecar": sname, "edges": int(len(san.friendship))}
    doc = {"provenance": provenance(cfg, "sanitize", srcs), "networks": nets}
    ws.save_manifest("sanitize", doc)
    return doc


def _sanitized(ws: Workspace, net: str) -> HeteroGraph:
    g = load_graph(ws.path(ws.load_manifest("sanitize")["networks"][net]["graph"]))
    check_graph_budget(g)
    return g


def stage_embed(cfg: PipelineConfig, ws: Workspace) -> dict:
    man = ws.load_manifest("sanitize")["networks"]
    nets = {}
    for k, net in enumerate(NETWORKS):
        g = _sanitized(ws, net)
        words = load_embeddings(ws.path(man[net]["words"]), WordEmbeddingTable)
        inputs = _digests(ws, [man[net]["graph"], man[net]["words"]])
        prov = provenance(cfg, "embed", inputs)
        run = fit_hetero(g, build_node_features(g, words), cfg.hetero_config(derive_seed(cfg.seed, "embed", k)))
        ename = ws.emit(f"emb_{net}", ".txt", lambda p: save_embeddings(run.embeddings, p, prov))
        cname = ws.emit(f"encoder_{net}", ".pfck", lambda p: save_checkpoint(p, run.params.arrays(), prov))
        nets[net] = {"embeddings": ename, "checkpoint": cname, "losses": [float(x) for x in run.losses]}
    doc = {"provenance": provenance(cfg, "embed", {}), "networks": nets}
    ws.save_manifest("embed", doc)
    return doc


def _embeddings(ws: Workspace, stage: str, key: str) -> dict[str, EmbeddingTable]:
    man = ws.load_manifest(stage)["networks"]
    return {net: load_embeddings(ws.path(man[net][key])) for net in NETWORKS}


def stage_align(cfg: PipelineConfig, ws: Workspace) -> dict:
    man = ws.load_manifest("embed")["networks"]
    Z = _embeddings(ws, "embed", "embeddings")
    prov = provenance(cfg, "align", _digests(ws, [man[n]["embeddings"] for n in NETWORKS]))
    model = train_mapping(Z["a"], Z["b"], cfg.gan_config(derive_seed(cfg.seed, "align")))
    anchors = predict_anchors(Z["a"], Z["b"], model, K=cfg.csls_k, margin=cfg.anchor_margin)
    aname = ws.emit("anchors", ".txt", lambda p: save_anchors(anchors, p, prov))
    mname = ws.emit("mapping", ".pfck", lambda p: save_checkpoint(p, {"W": model.W}, prov))
    doc = {
        "provenance": prov,
        "anchors": aname,
        "mapping": mname,
        "n_anchors": len(anchors),
        "orthogonality_error": model.orthogonality_error(),
        "history": model.history,
    }
    ws.save_manifest("align", doc)
    return doc


def stage_fuse(cfg: PipelineConfig, ws: Workspace) -> dict:
    emb_man = ws.load_manifest("embed")["networks"]
    san_man = ws.load_manifest("sanitize")["networks"]
    al = ws.load_manifest("align")
    Z = _embeddings(ws, "embed", "embeddings")
    G = {net: extract_user_graph(_sanitized(ws, net)) for net in NETWORKS}
    anchors = load_anchors(ws.path(al["anchors"]))
    names = [al["anchors"]] + [emb_man[n]["embeddings"] for n in NETWORKS] + [san_man[n]["graph"] for n in NETWORKS]
    prov = provenance(cfg, "fuse", _digests(ws, names))
    tcfg = cfg.fusion_train_config(derive_seed(cfg.seed, "fuse"))
    fcfg = cfg.fusion_config()
    run = fit_fusion(G["a"], G["b"], Z["a"], Z["b"], anchors, tcfg, fcfg)
    nets = {}
    for net, O in (("a", run.O1), ("b", run.O2)):
        nets[net] = {"embeddings": ws.emit(f"fused_{net}", ".txt", lambda p, O=O: save_embeddings(O, p, prov))}
    cname = ws.emit("fusion", ".pfck", lambda p: save_checkpoint(p, run.params.arrays(), prov))
    doc = {"provenance": prov, "networks": nets, "checkpoint": cname, "run": run.manifest(tcfg, fcfg)}
    ws.save_manifest("fuse", doc)
    return doc


def evaluate_embeddings(
    g: HeteroGraph, emb: EmbeddingTable, cfg: PipelineConfig, seed: int
) -> dict[str, EvalReport]:
    """Interest prediction and both attacks, each over ``cfg.repeats`` seeded splits."""
    reports: dict[str, EvalReport] = {}
    seeds = [derive_seed(seed, "eval-split", r) for r in range(cfg.repeats)]

    def splits(ids):
        return [split_ids(ids, cfg.split_ratio, s) for s in seeds]

    labeled = g.labeled_users()
    if len(labeled) >= 2:
        labels = {u: lab for u, lab in zip(g.users, g.labels) if lab is not None}
        reports["interests"] = predict_interests(emb, labels, splits(labeled), TreeConfig())
    for task, arr, fn, tcfg in (
        ("gender", g.gender, attack_gender, LogRegConfig()),
        ("occupation", g.occupation, attack_occupation, TreeConfig()),
    ):
        ids = [u for u, v in zip(g.users, arr) if v >= 0]
        if len(ids) >= 2:
            sens = {u: int(v) for u, v in zip(g.users, arr) if v >= 0}
            reports[task] = fn(emb, sens, splits(ids), tcfg)
    return reports


def stage_eval(cfg: PipelineConfig, ws: Workspace) -> dict:
    Z = _embeddings(ws, "embed", "embeddings")
    O = _embeddings(ws, "fuse", "embeddings")
    emb_man = ws.load_manifest("embed")["networks"]
    fuse_man = ws.load_manifest("fuse")["networks"]
    names = [emb_man[n]["embeddings"] for n in NETWORKS] + [fuse_man[n]["embeddings"] for n in NETWORKS]
    prov = provenance(cfg, "eval", _digests(ws, names))
    results: dict = {}
    summary: dict = {}
    for k, net in enumerate(NETWORKS):
        g = _sanitized(ws, net)
        results[net] = {}
        for kind, tables in (("single", Z), ("fused", O)):
            reps = evaluate_embeddings(g, tables[net], cfg, derive_seed(cfg.seed, "eval", k))
            results[net][kind] = {t: r.to_dict() for t, r in reps.items()}
            for t, r in reps.items():
                for metric in r.values:
                    summary[f"{net}.{kind}.{t}.{metric}"] = r.mean(metric)
    doc_body = {"provenance": prov, "results": results}
    rname = ws.emit(
        "report",
        ".json",
        lambda p: p.write_text(json.dumps(doc_body, indent=2, sort_keys=True) + "\n", encoding="utf-8"),
    )
    doc = {"provenance": prov, "report": rname, "summary": summary}
    ws.save_manifest("eval", doc)
    return doc


STAGE_FUNCS = {
    "sanitize": stage_sanitize,
    "embed": stage_embed,
    "align": stage_align,
    "fuse": stage_fuse,
    "eval": stage_eval,
}


def run_all(cfg: PipelineConfig, ws: Workspace) -> dict:
    out = {}
    for s in STAGES:
        out[s] = STAGE_FUNCS[s](cfg, ws)
    return out


def stage_sweep(cfg: PipelineConfig, ws: Workspace) -> dict:
    """Full pipeline for each attribute budget; one CSV row per (epsilon, task, metric)."""
    rows = []
    runs = {}
    for v in cfg.sweep_eps_a:
        sub_cfg = cfg.replace(eps_a=float(v))
        sub = Workspace(ws.root / "sweep" / f"eps_a-{v:g}")
        run_all(sub_cfg, sub)
        report = json.loads(sub.path(sub.load_manifest("eval")["report"]).read_text(encoding="utf-8"))
        fused = report["results"]["a"]["fused"]
        for task in sorted(fused):
            for metric, stats in sorted(fused[task]["metrics"].items()):
                rows.append({"epsilon": float(v), "task": task, "metric": metric, "mean": stats["mean"], "std": stats["std"]})
        runs[f"{v:g}"] = str(Path("sweep") / f"eps_a-{v:g}")
    rows.sort(key=lambda r: (r["task"], r["metric"], r["epsilon"]))
    prov = provenance(cfg, "sweep", {})
    cname = ws.emit("sweep", ".csv", lambda p: write_plot_csv(p, rows, prov))
    doc = {"provenance": prov, "csv": cname, "runs": runs, "network": "a", "embedding": "fused"}
    ws.save_manifest("sweep", doc)
    return doc


def measure_tmr_inputs(g: HeteroGraph, cfg: PipelineConfig) -> dict[str, dict[str, float]]:
    """Task and attack precision when each data type is embedded on its own."""
    ug = extract_user_graph(g)
    feats: dict[str, np.ndarray] = {}
    attrs = g.attrs.one_hot()
    feats["attribute"] = attrs if attrs.shape[1] else np.ones((g.n_users, 1))
    dw = deepwalk(
        ug,
        g.users,
        WalkConfig(seed=derive_seed(cfg.seed, "tmr-walks")),
        cfg.skipgram_config(derive_seed(cfg.seed, "tmr-deepwalk")),
    )
    feats["friendship"] = dw.vectors
    corpus = _corpus(g)
    post_vec = np.zeros((g.n_users, cfg.word_dim))
    if corpus:
        words = train_skipgram(corpus, cfg.skipgram_config(derive_seed(cfg.seed, "tmr-words")))
        idx = words.index()
        sums = np.zeros((g.n_users, words.dim))
        counts = np.zeros(g.n_users)
        for a, toks in zip(g.author, g.post_text):
            rows = [idx[t] for t in toks if t in idx]
            if rows:
                sums[a] += words.vectors[rows].sum(axis=0)
                counts[a] += len(rows)
        post_vec = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    feats["posts"] = post_vec
    out: dict[str, dict[str, float]] = {"task": {}, "gender": {}, "occupation": {}}
    for dtype in DATA_TYPES:
        reps = evaluate_embeddings(g, EmbeddingTable(g.users, feats[dtype]), cfg, derive_seed(cfg.seed, "tmr-eval"))
        for task, key in (("interests", "task"), ("gender", "gender"), ("occupation", "occupation")):
            if task not in reps:
                raise ValueError(f"graph lacks {task} labels needed for the TMR table")
            out[key][dtype] = reps[task].mean("precision")
    return out


def stage_tmr(cfg: PipelineConfig, ws: Workspace, precisions: str | Path | None = None) -> dict:
    """TMR per data type and the budget split of ``eps_a + eps_g + eps_t`` it implies."""
    if precisions is not None:
        prec = json.loads(Path(precisions).read_text(encoding="utf-8"))
        inputs = {"precisions": sha256_file(precisions)}
    else:
        src = _require(cfg.graph_a, "graph_a")
        prec = measure_tmr_inputs(load_graph(src), cfg)
        inputs = {"graph_a": sha256_file(src)}
    try:
        report = compute_tmr(prec["task"], prec["gender"], prec["occupation"])
    except KeyError as exc:
        raise ValueError(f"precision table lacks entry {exc}") from None
    total = cfg.eps_a + cfg.eps_g + cfg.eps_t
    alloc = allocate_budgets(report, total)
    body = {
        "provenance": provenance(cfg, "tmr", inputs),
        "rows": {k: asdict(r) for k, r in report.rows.items()},
        "total_budget": total,
        "allocation": asdict(alloc),
    }
    tname = ws.emit(
        "tmr", ".json", lambda p: p.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    )
    doc = {**body, "table": tname}
    ws.save_manifest("tmr", doc)
    return doc
