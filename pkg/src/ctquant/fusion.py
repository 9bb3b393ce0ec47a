"""Joint-representation network: per-feature gated encoders plus soft
attention-based feature interaction.

Stage 1 aligns the deep-feature vector and each scalar biomarker into a
shared width-L embedding (per-feature two-layer encoder, then a per-feature
gated residual block). Stage 2 runs 2-head self-attention over the N+1
embeddings, derives a softmax contribution score per feature, and classifies
the score-weighted combination of the embeddings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .biomarkers import BIOMARKER_NAMES
from .errors import HashMismatch, MissingFile, ShapeMismatch, VersionMismatch
from .tensor_core import Tape, Tensor2

MODEL_FORMAT_VERSION = 1

FEATURE_NAMES = ("deep_features", *BIOMARKER_NAMES)


@dataclass
class FusionConfig:
    n_biomarkers: int = 18
    embed_width: int = 32        # L
    deep_width: int = 512        # D
    heads: int = 2
    dropout: float = 0.5
    encoder_hidden: int = 64
    head_width: int = 16         # key/query/value width per head
    seed: int = 0

    @property
    def n_features(self):
        return self.n_biomarkers + 1

    def validate(self):
        if self.heads * self.head_width != self.embed_width:
            raise ShapeMismatch(
                "heads * head_width must equal embed_width "
                f"({self.heads} * {self.head_width} != {self.embed_width})")
        for name in ("n_biomarkers", "embed_width", "deep_width", "heads",
                     "encoder_hidden", "head_width"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"{name} must be >= 1")

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "n_biomarkers", "embed_width", "deep_width", "heads", "dropout",
            "encoder_hidden", "head_width", "seed")}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PredictionReport:
    scan_id: str
    probability: float
    contributions: dict          # feature name -> score
    model_hash: str

    def to_json_dict(self):
        return {
            "scan_id": self.scan_id,
            "probability": self.probability,
            "contributions": self.contributions,
            "model_hash": self.model_hash,
        }


def _uniform_init(rng, rows, cols):
    bound = 1.0 / np.sqrt(rows)
    return rng.uniform(-bound, bound, size=(rows, cols))


class FusionModel:
    """Parameter container plus forward passes.

    Parameters live in an ordered dict of float64 arrays; order is fixed by
    construction so that serialization and gradient flattening are
    deterministic.
    """

    def __init__(self, config: FusionConfig):
        config.validate()
        self.config = config
        self.params = {}
        rng = np.random.default_rng(config.seed)
        cfg = config
        L, H = cfg.embed_width, cfg.encoder_hidden

        for i in range(cfg.n_features):
            d_in = cfg.deep_width if i == 0 else 1
            self._add(rng, f"enc{i}_w1", d_in, H)
            self._add(rng, f"enc{i}_b1", 1, H, zero=True)
            self._add(rng, f"enc{i}_w2", H, L)
            self._add(rng, f"enc{i}_b2", 1, L, zero=True)
            # GRN: FC1 L->L, FC2 L->2L (GLU gate pair)
            self._add(rng, f"grn{i}_w1", L, L)
            self._add(rng, f"grn{i}_b1", 1, L, zero=True)
            self._add(rng, f"grn{i}_w2", L, 2 * L)
            self._add(rng, f"grn{i}_b2", 1, 2 * L, zero=True)
            self._add(rng, f"grn{i}_gamma", 1, L, one=True)
            self._add(rng, f"grn{i}_beta", 1, L, zero=True)

        for h in range(cfg.heads):
            self._add(rng, f"attn_wq{h}", L, cfg.head_width)
            self._add(rng, f"attn_wk{h}", L, cfg.head_width)
            self._add(rng, f"attn_wv{h}", L, cfg.head_width)
        self._add(rng, "attn_wo", L, L)
        self._add(rng, "attn_bo", 1, L, zero=True)

        self._add(rng, "contrib_w", cfg.n_features * L, cfg.n_features)
        self._add(rng, "contrib_b", 1, cfg.n_features, zero=True)
        self._add(rng, "clf_w", L, 1)
        self._add(rng, "clf_b", 1, 1, zero=True)

    def _add(self, rng, name, rows, cols, zero=False, one=False):
        if zero:
            value = np.zeros((rows, cols))
        elif one:
            value = np.ones((rows, cols))
        else:
            value = _uniform_init(rng, rows, cols)
        self.params[name] = value

    # --- parameter plumbing -------------------------------------------------

    def n_parameters(self):
        return sum(p.size for p in self.params.values())

    def as_tensors(self, tape: Tape):
        return {name: Tensor2(value, tape=tape, requires_grad=True, name=name)
                for name, value in self.params.items()}

    def content_hash(self) -> str:
        payload = json.dumps(
            {"config": self.config.to_dict(),
             "params": {k: _array_to_list(v) for k, v in self.params.items()}},
            sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    # --- forward passes -----------------------------------------------------

    def encode(self, tape, tensors, x1, biomarkers):
        """Per-feature encoders over a batch; returns list of (B, L) tensors."""
        cfg = self.config
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        biomarkers = np.atleast_2d(np.asarray(biomarkers, dtype=float))
        if x1.shape[1] != cfg.deep_width:
            raise ShapeMismatch(
                f"x1 must have {cfg.deep_width} columns, got {x1.shape}")
        if biomarkers.shape[1] != cfg.n_biomarkers:
            raise ShapeMismatch(
                f"biomarkers must have {cfg.n_biomarkers} columns, "
                f"got {biomarkers.shape}")
        if x1.shape[0] != biomarkers.shape[0]:
            raise ShapeMismatch("x1 and biomarker batch sizes differ")
        embeddings = []
        for i in range(cfg.n_features):
            xi = x1 if i == 0 else biomarkers[:, i - 1:i]
            x = Tensor2(xi, tape=tape)
            h = tape.add(tape.matmul(x, tensors[f"enc{i}_w1"]),
                         tensors[f"enc{i}_b1"])
            h = tape.elu(h)
            e = tape.add(tape.matmul(h, tensors[f"enc{i}_w2"]),
                         tensors[f"enc{i}_b2"])
            embeddings.append(e)
        return embeddings

    def grn_apply(self, tape, tensors, embeddings, dropout_rng=None):
        """Per-feature gated residual blocks; returns list of (1, L) rows."""
        cfg = self.config
        out = []
        for i, e in enumerate(embeddings):
            h = tape.add(tape.matmul(e, tensors[f"grn{i}_w1"]),
                         tensors[f"grn{i}_b1"])
            h = tape.elu(h)
            eta = tape.add(tape.matmul(h, tensors[f"grn{i}_w2"]),
                           tensors[f"grn{i}_b2"])
            if dropout_rng is not None and cfg.dropout > 0:
                eta = tape.dropout(eta, cfg.dropout, dropout_rng)
            gated = tape.glu(eta)
            res = tape.add(gated, e)
            normed = tape.layer_norm(res)
            normed = tape.add(tape.mul(normed, tensors[f"grn{i}_gamma"]),
                              tensors[f"grn{i}_beta"])
            out.append(normed)
        return out

    def interact(self, tape, tensors, g):
        """Self-attention over the rows of G (N+1, L).

        Returns (m, s, per_head_attention_weights).
        """
        cfg = self.config
        heads = []
        head_weights = []
        scale = 1.0 / np.sqrt(cfg.head_width)
        for h in range(cfg.heads):
            q = tape.matmul(g, tensors[f"attn_wq{h}"])
            k = tape.matmul(g, tensors[f"attn_wk{h}"])
            v = tape.matmul(g, tensors[f"attn_wv{h}"])
            scores = tape.scale(tape.matmul(q, tape.transpose(k)), scale)
            weights = tape.softmax(scores)
            head_weights.append(weights)
            heads.append(tape.matmul(weights, v))
        attended = tape.matmul(tape.concat(heads, axis=1), tensors["attn_wo"])
        attended = tape.add(attended, tensors["attn_bo"])
        m = tape.reshape(attended, 1, cfg.n_features * cfg.embed_width)
        logits = tape.add(tape.matmul(m, tensors["contrib_w"]),
                          tensors["contrib_b"])
        s = tape.softmax(logits)                    # (1, N+1)
        return m, s, head_weights

    def combine_and_classify(self, tape, tensors, s, g):
        """c = s . G, then affine + sigmoid; returns (probability, logit)."""
        c = tape.matmul(s, g)                       # (1, L)
        logit = tape.add(tape.matmul(c, tensors["clf_w"]), tensors["clf_b"])
        prob = tape.sigmoid(logit)
        return prob, logit

    def forward_batch(self, tape, tensors, x1, biomarkers, dropout_rng=None):
        """Full pass over a batch; returns lists of (prob, logit, s, g)."""
        e = self.encode(tape, tensors, x1, biomarkers)
        rows = self.grn_apply(tape, tensors, e, dropout_rng=dropout_rng)
        batch = rows[0].shape[0]
        outs = []
        for r in range(batch):
            g = tape.gather_rows(rows, r)           # (N+1, L)
            _, s, _ = self.interact(tape, tensors, g)
            prob, logit = self.combine_and_classify(tape, tensors, s, g)
            outs.append((prob, logit, s, g))
        return outs

    def forward(self, tape, tensors, x1_row, biom_row, dropout_rng=None):
        """Single-record pass; returns (prob, logit, s, g)."""
        return self.forward_batch(tape, tensors, x1_row, biom_row,
                                  dropout_rng=dropout_rng)[0]

    def predict(self, scan_id, x1, biomarkers) -> PredictionReport:
        """Inference on one normalized record (dropout off)."""
        tape = Tape()
        tensors = self.as_tensors(tape)
        x1_row = np.asarray(x1, dtype=float).reshape(1, -1)
        biom_row = np.asarray(biomarkers, dtype=float).reshape(1, -1)
        prob, _, s, _ = self.forward(tape, tensors, x1_row, biom_row)
        scores = s.value.ravel()
        names = feature_names(self.config)
        return PredictionReport(
            scan_id=scan_id,
            probability=float(prob.value[0, 0]),
            contributions={n: float(v) for n, v in zip(names, scores)},
            model_hash=self.content_hash())


def feature_names(config: FusionConfig):
    if config.n_biomarkers == len(BIOMARKER_NAMES):
        return list(FEATURE_NAMES)
    return ["deep_features"] + [f"biomarker_{i}" for i in
                                range(1, config.n_biomarkers + 1)]


# --- serialization ----------------------------------------------------------

def _array_to_list(a):
    return [[repr(float(x)) for x in row] for row in a]


def _array_from_list(rows):
    return np.array([[float(x) for x in row] for row in rows], dtype=float)


def save_model(model: FusionModel, path):
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "params": {k: _array_to_list(v) for k, v in model.params.items()},
    }
    doc["sha256"] = hashlib.sha256(
        json.dumps({"config": doc["config"], "params": doc["params"]},
                   sort_keys=True).encode()).hexdigest()
    Path(path).write_text(json.dumps(doc) + "\n")


def load_model(path) -> FusionModel:
    if not Path(path).is_file():
        raise MissingFile(f"model file {path} not found")
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise VersionMismatch(
            f"model format {doc.get('format_version')} unsupported")
    expected = hashlib.sha256(
        json.dumps({"config": doc["config"], "params": doc["params"]},
                   sort_keys=True).encode()).hexdigest()
    if expected != doc.get("sha256"):
        raise HashMismatch("model file content hash mismatch")
    model = FusionModel(FusionConfig.from_dict(doc["config"]))
    for name in model.params:
        model.params[name] = _array_from_list(doc["params"][name])
    return model
