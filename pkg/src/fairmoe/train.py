"""Training, evaluation and ablation runs.

A step draws a batch, encodes both modalities, and computes the contrastive
loss.  When FOL is on, it also forwards one auxiliary batch per protected
group (``n_f`` pairs each) to build the per-group gate stacks.  The
variance terms and ``L_distance`` are added, and one Adam update follows.
Batches come from cursor-based index queues, so a run is a pure function
of its config and a checkpoint restores it exactly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nncore as nn
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import NEGATIVE_PROMPT, POSITIVE_PROMPT, Dataset, GroupSampler, IndexQueue
from .encoder import DualEncoder, Encoded, ModelConfig
from .losses import TERMS, LossWeights, StackedGates, contrastive_loss, fol, pair_similarities, total_loss
from .metrics import ATTRIBUTES, MetricsReport, PredictionRecord, auc, evaluate_attribute
from .nncore import ContractError, Tensor

log = logging.getLogger(__name__)

LOG_KEYS = ("contrastive", "F_EI", "F_ET", "F_FI", "F_FT", "L_distance", "total")


class DivergenceError(RuntimeError):
    """Raised when a loss turns non-finite."""


@dataclass
class TrainConfig:
    # model
    image_size: int = 16
    patch_size: int = 4
    dim: int = 32
    heads: int = 4
    blocks: int = 2
    d_feat: int = 16
    vocab_size: int = 64
    seq_len: int = 16
    m1: int = 4
    m2: int = 4
    k1: int = 2
    k2: int = 2
    capacity: float = 1.0
    hidden_mult: int = 4
    activation: str = "gelu"
    # loss
    lambda_fol: float = 1.0
    lambda_dist: float = 1e-4
    sinkhorn_epsilon: float = 1e-3
    sinkhorn_iters: int = 200
    n_f: int = 0  # FOL sample count per group; 0 means batch_size
    fol_attribute: str = "race"
    multi_attribute_fol: bool = False
    fol_gate_mode: str = "sparse"
    # optimisation
    batch_size: int = 32
    steps: int = 200
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 50
    split: str = "0.7,0.1,0.2"
    # ablation switches
    use_fol: bool = True
    use_fom: bool = True
    use_em: bool = True
    use_fm: bool = True
    use_text_moe: bool = True
    use_image_moe: bool = True
    use_distance: bool = True
    term_mask: str = "EI,ET,FI,FT"

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ContractError("invalid config: " + "; ".join(errors))

    def problems(self) -> list[str]:
        errs = []
        if self.fol_gate_mode not in ("sparse", "dense"):
            errs.append("fol_gate_mode must be 'sparse' or 'dense'")
        if self.fol_attribute not in ATTRIBUTES:
            errs.append(f"fol_attribute must be one of {ATTRIBUTES}")
        bad = [t for t in self.terms_requested() if t not in TERMS]
        if bad:
            errs.append(f"term_mask has unknown terms {bad}")
        for name in ("batch_size", "steps", "sinkhorn_iters", "eval_every"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.batch_size < 2:
            errs.append("batch_size must be >= 2")
        if self.n_f < 0:
            errs.append("n_f must be >= 0")
        if self.lr <= 0:
            errs.append("lr must be positive")
        if self.lambda_fol < 0 or self.lambda_dist < 0:
            errs.append("loss weights must be non-negative")
        try:
            fr = self.split_fractions()
            if len(fr) != 3 or not math.isclose(sum(fr), 1.0) or min(fr) < 0:
                errs.append("split must be three non-negative fractions summing to 1")
        except ValueError:
            errs.append("split must be a comma-separated list of numbers")
        try:
            self.model_config()
        except ContractError as exc:
            errs.append(str(exc))
        return errs

    def terms_requested(self) -> list[str]:
        return [t.strip() for t in self.term_mask.split(",") if t.strip()]

    def split_fractions(self) -> list[float]:
        return [float(x) for x in self.split.split(",")]

    @property
    def fol_on(self) -> bool:
        return self.use_fol and self.lambda_fol > 0

    def effective_terms(self) -> tuple[str, ...]:
        """Requested variance terms minus those whose MoE layer is switched off."""
        cfg = self.model_config()
        live = set(self.terms_requested())
        if not (cfg.use_em and cfg.use_image_moe):
            live.discard("EI")
        if not (cfg.use_em and cfg.use_text_moe):
            live.discard("ET")
        if not (cfg.use_fm and cfg.use_image_moe):
            live.discard("FI")
        if not (cfg.use_fm and cfg.use_text_moe):
            live.discard("FT")
        return tuple(t for t in TERMS if t in live)

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        kw["use_em"] = self.use_em and self.use_fom
        kw["use_fm"] = self.use_fm and self.use_fom
        return ModelConfig(**kw)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_fol, self.lambda_dist, self.sinkhorn_epsilon, self.sinkhorn_iters)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# config files: one ``key = value`` per line, ``#`` comments
# ---------------------------------------------------------------------------


def _coerce(name: str, raw: str, typ):
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def parse_config_text(text: str) -> TrainConfig:
    """Parse a flat key-value document; every problem is reported at once."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values, errors = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(key, raw, types[key])
        except ValueError as exc:
            errors.append(f"line {lineno}: {exc}")
    # semantic checks run on whatever parsed, so one pass reports everything
    probe = object.__new__(TrainConfig)
    for f in fields(TrainConfig):
        setattr(probe, f.name, values.get(f.name, f.default))
    errors.extend(probe.problems())
    if errors:
        raise ContractError("config errors:\n  " + "\n  ".join(errors))
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------


def batch_inputs(ds: Dataset, idx: Sequence[int]):
    images = ds.images(idx)
    toks = [ds.tokens(i) for i in idx]
    return images, toks


def _gate_rows(enc: Encoded, which: str, mode: str, rows: slice | np.ndarray | None = None) -> Tensor | None:
    """Flatten one layer's gate matrix to ``[R, M]``; padded text rows are dropped."""
    gates = enc.embed_gates if which == "E" else enc.feature_gates
    if gates is None:
        return None
    w = gates.sparse if mode == "sparse" else gates.dense
    if rows is not None:
        w = w[rows]
    M = w.shape[-1]
    if which == "E" and gates.row_mask is not None:
        mask = gates.row_mask if rows is None else gates.row_mask[rows]
        return w[np.nonzero(mask)]
    return w.reshape(-1, M)


def build_stacks(main_i: Encoded, main_t: Encoded, aux_i: Encoded | None, aux_t: Encoded | None, group_slices: dict, mode: str) -> dict:
    out = {}
    for term in TERMS:
        which, modality = term[0], term[1]
        main, aux = (main_i, aux_i) if modality == "I" else (main_t, aux_t)
        overall = _gate_rows(main, which, mode)
        if overall is None or aux is None:
            out[term] = None
            continue
        by_group = {g: _gate_rows(aux, which, mode, sl) for g, sl in group_slices.items()}
        out[term] = StackedGates(overall, by_group)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: DualEncoder
    opt: nn.OptimizerState
    step: int
    main_cursor: int
    group_cursors: dict
    best_val_auc: float | None = None
    best_step: int | None = None
    best_params: dict | None = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Checkpoint
    log: list = field(default_factory=list)
    model: DualEncoder | None = None


def _to_checkpoint(cfg: TrainConfig, st: TrainState, params: dict | None = None) -> Checkpoint:
    names = [k for k, _ in st.model.named_parameters()]
    return Checkpoint(
        config=cfg.to_dict(),
        params=params if params is not None else st.model.state_dict(),
        step=st.step,
        opt={"lr": st.opt.lr, "beta1": st.opt.beta1, "beta2": st.opt.beta2, "eps": st.opt.eps, "step": st.opt.step},
        adam_m=dict(zip(names, st.opt.m)),
        adam_v=dict(zip(names, st.opt.v)),
        sampler={"main": st.main_cursor, "groups": st.group_cursors},
        best_params=dict(st.best_params or {}) if params is None else {},
        extras={"best_val_auc": st.best_val_auc, "best_step": st.best_step},
    )


def model_from_checkpoint(ckpt: Checkpoint) -> DualEncoder:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = DualEncoder(cfg.model_config(), seed=cfg.seed)
    model.load_state_dict(ckpt.params)
    return model


def _fresh_state(cfg: TrainConfig) -> TrainState:
    model = DualEncoder(cfg.model_config(), seed=cfg.seed)
    opt = nn.OptimizerState.for_params(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    return TrainState(model, opt, 0, 0, {})


def _resume_state(cfg: TrainConfig, ckpt: Checkpoint) -> TrainState:
    model = model_from_checkpoint(ckpt)
    names = [k for k, _ in model.named_parameters()]
    opt = nn.OptimizerState(
        lr=ckpt.opt["lr"], beta1=ckpt.opt["beta1"], beta2=ckpt.opt["beta2"], eps=ckpt.opt["eps"], step=ckpt.opt["step"],
        m=[ckpt.adam_m[k].copy() for k in names], v=[ckpt.adam_v[k].copy() for k in names],
    )
    return TrainState(
        model, opt, ckpt.step, int(ckpt.sampler.get("main", 0)), dict(ckpt.sampler.get("groups", {})),
        ckpt.extras.get("best_val_auc"), ckpt.extras.get("best_step"), dict(ckpt.best_params) or None,
    )


def compute_losses(
    model: DualEncoder,
    cfg: TrainConfig,
    ds: Dataset,
    idx: np.ndarray,
    group_batches: dict | None,
    attribute: str | None = None,
) -> dict:
    """Forward one training step; returns tensors for every logged component."""
    attribute = attribute or cfg.fol_attribute
    images, toks = batch_inputs(ds, idx)
    enc_i = model.encode_image(images)
    enc_t = model.encode_text(toks)
    con = contrastive_loss(enc_i.feature, enc_t.feature, logit_scale=model.scale())
    zero = nn.Tensor(0.0)
    parts = {"contrastive": con, "F_EI": zero, "F_ET": zero, "F_FI": zero, "F_FT": zero, "L_distance": zero}
    if cfg.fol_on and group_batches is not None:
        weights = cfg.loss_weights()
        groups_main = ds.attribute(attribute)[idx]
        aux_idx = np.concatenate([group_batches[g] for g in group_batches])
        slices, start = {}, 0
        for g, b in group_batches.items():
            slices[g] = slice(start, start + len(b))
            start += len(b)
        terms = cfg.effective_terms()
        need_img = any(t in terms for t in ("EI", "FI"))
        need_txt = any(t in terms for t in ("ET", "FT"))
        aux_images, aux_toks = batch_inputs(ds, aux_idx)
        aux_i = model.encode_image(aux_images) if need_img else None
        aux_t = model.encode_text(aux_toks) if need_txt else None
        stacks = build_stacks(enc_i, enc_t, aux_i, aux_t, slices, cfg.fol_gate_mode)
        sims = pair_similarities(enc_i.feature, enc_t.feature)
        res = fol(stacks, sims, groups_main, weights, term_mask=terms, use_distance=cfg.use_distance)
        parts.update(res.terms)
    fol_sum = parts["F_EI"] + parts["F_ET"] + parts["F_FI"] + parts["F_FT"] + parts["L_distance"]
    lam = cfg.lambda_fol if cfg.fol_on else 0.0
    parts["total"] = total_loss(con, fol_sum, replace(cfg.loss_weights(), lambda_fol=lam))
    return parts


def train(
    config: TrainConfig,
    train_set: Dataset,
    val_set: Dataset | None = None,
    steps: int | None = None,
    resume: Checkpoint | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``steps`` (default ``config.steps``) optimisation steps.

    With ``resume`` the run continues from the checkpoint's step, optimiser
    moments and sampler cursors; the loss log then continues exactly as an
    uninterrupted run would.
    """
    cfg = config
    if len(train_set) < cfg.batch_size:
        raise ContractError(f"training set ({len(train_set)}) smaller than batch size ({cfg.batch_size})")
    st = _resume_state(cfg, resume) if resume is not None else _fresh_state(cfg)
    steps = cfg.steps if steps is None else steps
    n_f = cfg.n_f or cfg.batch_size
    main_q = IndexQueue(np.arange(len(train_set)), [cfg.seed, 1], st.main_cursor)
    attrs = list(ATTRIBUTES) if cfg.multi_attribute_fol else [cfg.fol_attribute]
    samplers = {
        a: GroupSampler(train_set, a, n_f, cfg.seed * 1000 + i, st.group_cursors.get(a)) for i, a in enumerate(attrs)
    }
    params = st.model.parameters()
    records = []
    for _ in range(steps):
        idx = main_q.draw(cfg.batch_size)
        parts_all = []
        for a in attrs:
            gb = samplers[a].draw() if cfg.fol_on else None
            parts_all.append(compute_losses(st.model, cfg, train_set, idx, gb, a))
        parts = parts_all[0]
        if len(parts_all) > 1:
            # contrastive is shared; FOL pieces add over attributes
            for p in parts_all[1:]:
                for k in LOG_KEYS[1:-1]:
                    parts[k] = parts[k] + p[k]
            fol_sum = sum((parts[k] for k in LOG_KEYS[1:-1]), nn.Tensor(0.0))
            parts["total"] = total_loss(parts["contrastive"], fol_sum, cfg.loss_weights())
        rec = {"step": st.step + 1, **{k: float(parts[k].data) for k in LOG_KEYS}}
        if not all(math.isfinite(v) for v in rec.values()):
            raise DivergenceError(f"non-finite loss at step {st.step + 1}: {rec}; batch ids {[train_set.ids()[i] for i in idx]}")
        grads = nn.backward(parts["total"], params)
        nn.adam_step(params, [grads[p] for p in params], st.opt)
        st.step += 1
        records.append(rec)
        if on_step:
            on_step(rec)
        if val_set is not None and len(val_set) and st.step % cfg.eval_every == 0:
            try:
                v = auc(predict(st.model, val_set))
            except ValueError:
                v = None
            rec["val_auc"] = v
            if v is not None and (st.best_val_auc is None or v > st.best_val_auc):
                st.best_val_auc, st.best_step, st.best_params = v, st.step, st.model.state_dict()
    st.main_cursor = main_q.cursor
    st.group_cursors = {a: s.state() for a, s in samplers.items()}
    ckpt = _to_checkpoint(cfg, st)
    if st.best_params is not None:
        best = _to_checkpoint(cfg, st, params=st.best_params)
        best.extras["selected"] = "best_val_auc"
    else:
        best = ckpt
    return TrainResult(ckpt, best, records, st.model)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict(
    model: DualEncoder,
    ds: Dataset,
    prompts: tuple[Sequence[int], Sequence[int]] = (POSITIVE_PROMPT, NEGATIVE_PROMPT),
    batch_size: int = 256,
) -> list[PredictionRecord]:
    """Score each image by ``cos(img, positive prompt) - cos(img, negative prompt)``."""
    with nn.no_grad():
        txt = model.encode_text([list(prompts[0]), list(prompts[1])]).feature.data
        txt = txt / np.linalg.norm(txt, axis=1, keepdims=True)
        feats = []
        for s in range(0, len(ds), batch_size):
            idx = list(range(s, min(s + batch_size, len(ds))))
            f = model.encode_image(ds.images(idx)).feature.data
            feats.append(f / np.linalg.norm(f, axis=1, keepdims=True))
    feats = np.concatenate(feats) if feats else np.zeros((0, txt.shape[1]))
    sims = feats @ txt.T
    scores = sims[:, 0] - sims[:, 1]
    out = []
    for i in range(len(ds)):
        ex_attrs = ds._field(i, "attributes")
        out.append(PredictionRecord(float(scores[i]), int(ds._field(i, "label")), dict(ex_attrs), ds.ids()[i]))
    return out


def evaluate(
    checkpoint: Checkpoint | DualEncoder,
    test_set: Dataset,
    prompts=(POSITIVE_PROMPT, NEGATIVE_PROMPT),
    attributes: Sequence[str] = ATTRIBUTES,
    dpd_mode: str = "standard",
    threshold: float = 0.5,
    bootstrap: int = 0,
    seed: int = 0,
) -> tuple[list[PredictionRecord], list[MetricsReport]]:
    if len(test_set) == 0:
        raise ContractError("test set is empty")
    model = checkpoint if isinstance(checkpoint, DualEncoder) else model_from_checkpoint(checkpoint)
    records = predict(model, test_set, prompts)
    reports = [evaluate_attribute(records, a, threshold, dpd_mode, bootstrap, seed) for a in attributes]
    return records, reports


def save_log(records: Sequence[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records))


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

SUITES: dict[str, list[tuple[str, dict]]] = {
    "fol": [("Fair-MoE", {}), ("w/o FOL", {"use_fol": False})],
    "fom": [
        ("FairCLIP", {"use_fom": False, "term_mask": ""}),
        ("FairCLIP w. FOM", {"term_mask": ""}),
    ],
    "terms": [("Fair-MoE", {})]
    + [(f"w/o F_{t}", {"term_mask": ",".join(x for x in TERMS if x != t)}) for t in TERMS],
    "layers": [("Fair-MoE", {}), ("w/o EM", {"use_em": False}), ("w/o FM", {"use_fm": False})],
    "modality": [
        ("Fair-MoE", {}),
        ("w/o Text MoE", {"use_text_moe": False}),
        ("w/o Image MoE", {"use_image_moe": False}),
    ],
}


@dataclass
class AblationRow:
    variant: str
    attribute: str
    runs: list  # one MetricsReport per seed

    def stat(self, key: str) -> tuple[float | None, float | None]:
        vals = [getattr(r, key) for r in self.runs if getattr(r, key) is not None]
        if not vals:
            return None, None
        return float(np.mean(vals)), (float(np.std(vals)) if len(vals) > 1 else None)


def run_ablation_suite(
    base_config: TrainConfig,
    dataset: Dataset | tuple[Dataset, Dataset, Dataset],
    variants: str | Sequence[tuple[str, dict]],
    seeds: Sequence[int] = (0, 1, 2),
    attributes: Sequence[str] | None = None,
    dpd_mode: str = "standard",
    on_run: Callable[[str, int, list], None] | None = None,
) -> list[AblationRow]:
    """Train every variant on every seed (paired: seed ``s`` is shared across variants)."""
    if isinstance(variants, str):
        if variants not in SUITES:
            raise ContractError(f"unknown suite {variants!r}; choose from {sorted(SUITES)}")
        variants = SUITES[variants]
    if isinstance(dataset, Dataset):
        from .data import split

        tr, va, te = split(dataset, base_config.split_fractions(), seed=0)
    else:
        tr, va, te = dataset
    attributes = list(attributes or [base_config.fol_attribute])
    rows = {(name, a): AblationRow(name, a, []) for name, _ in variants for a in attributes}
    for name, overrides in variants:
        for s in seeds:
            cfg = TrainConfig.from_dict({**base_config.to_dict(), **overrides, "seed": int(s)})
            res = train(cfg, tr, va)
            _, reports = evaluate(res.best, te, attributes=attributes, dpd_mode=dpd_mode)
            for rep in reports:
                rows[(name, rep.attribute)].runs.append(rep)
            if on_run:
                on_run(name, s, res.log)
    return list(rows.values())


def format_grid(rows: Sequence[AblationRow]) -> str:
    """Variants x (ES-AUC, AUC, DPD, EOD), mean[±std] x 100."""
    keys = (("ES-AUC", "es_auc"), ("AUC", "auc"), ("DPD", "dpd"), ("EOD", "eod"))

    def cell(row, k):
        m, s = row.stat(k)
        if m is None:
            return "n/a"
        return f"{100 * m:.2f}" if s is None else f"{100 * m:.2f}±{100 * s:.2f}"

    body = [(r.attribute, r.variant, *[cell(r, k) for _, k in keys]) for r in rows]
    head = ("Attr.", "Model", *[h for h, _ in keys])
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    fmt = "  ".join(f"{{:<{w}}}" if i < 2 else f"{{:>{w}}}" for i, w in enumerate(widths))
    lines = [fmt.format(*head), "-" * (sum(widths) + 2 * (len(widths) - 1))]
    lines += [fmt.format(*b) for b in body]
    return "\n".join(lines)
