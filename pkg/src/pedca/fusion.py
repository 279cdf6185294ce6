"""Late-fusion head, focal loss, the full PedCA-FT model, training and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .cohort import ConfigError, FeatureSpec, PatientRecord, filter_window, schema_hash
from .layers import Linear, Module, TransformerEncoder
from .numerics import AdamState, NumericalError, Tensor, TrainingError, adam_step
from .tabular import TabularBatch, TabularPreprocessor, TabularTransformer
from .textual import (
    DEFAULT_MAX_LEN,
    TextualEncoder,
    Vocabulary,
    assemble_document,
    build_vocab,
    check_text_schema,
    pad_batch,
    tokenize,
)

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
MODES = ("fused", "tabular-only", "textual-only")
CHECKPOINT_FORMAT = "pedca-checkpoint"
CHECKPOINT_VERSION = 1


class SchemaMismatchError(ValueError):
    """A checkpoint was built for a different feature schema."""


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 2.0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    adam_eps: float = 1e-8
    embedding_lr: float = 3e-2
    embedding_eps: float = 1e-4
    text_lr: float = 1e-5
    zero_residual: bool = False
    seed: int = 0
    tau: float = 24.0
    d: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_txt: int = 32
    n_layers_txt: int = 2
    n_heads_txt: int = 4
    d_fusion: int = 32
    n_layers_fusion: int = 1
    n_heads_fusion: int = 4
    max_sequence_length: int = DEFAULT_MAX_LEN
    mode: str = "fused"

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if min(self.lr, self.adam_eps, self.embedding_lr, self.embedding_eps, self.text_lr) <= 0:
            raise ConfigError("learning rates and Adam eps values must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_sequence_length < 1:
            raise ConfigError("max_sequence_length must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def sigmoid_clamped(logit: Tensor) -> Tensor:
    return nx.clip(nx.sigmoid(logit), PROB_CLAMP, 1.0 - PROB_CLAMP)


def focal_loss(p: Tensor, y, gamma: float) -> Tensor:
    """Per-example -(1 - p_true)^gamma * log(p_true), p_true = p if y == 1 else 1 - p."""
    y = np.asarray(y, dtype=np.float64)
    p_true = nx.add(nx.mul(p, 2.0 * y - 1.0), 1.0 - y)
    p_true = nx.clip(p_true, PROB_CLAMP, 1.0 - PROB_CLAMP)
    nll = -nx.log(p_true)
    if gamma == 0:
        return nll
    return nx.mul(nx.power(1.0 - p_true, gamma), nll)


class FusionHead(Module):
    """Two-token transformer over projected (h_tab, h_txt), mean-pooled, affine, sigmoid."""

    def __init__(self, rng: np.random.Generator, d_tab: int, d_txt: int, d_fusion: int = 32,
                 n_layers: int = 1, n_heads: int = 4, zero_residual: bool = False):
        self.project_tab = Linear(rng, d_tab, d_fusion)
        self.project_txt = Linear(rng, d_txt, d_fusion)
        # text token starts constant, so the fused model starts out as the tabular-only one
        self.project_txt.weight.data[...] = 0.0
        self.type_embedding = nx.parameter(rng.normal(0.0, 0.02, size=(2, d_fusion)))
        self.encoder = TransformerEncoder(rng, d_fusion, n_layers, n_heads, zero_residual=zero_residual)
        self.output = Linear(rng, d_fusion, 1)

    def logit(self, h_tab, h_txt) -> Tensor:
        h_tab, h_txt = nx.as_tensor(h_tab), nx.as_tensor(h_txt)
        for h in (h_tab, h_txt):
            if not np.all(np.isfinite(h.data)):
                raise NumericalError("non-finite view embedding passed to the fusion head")
        a = self.project_tab(h_tab) + self.type_embedding[0]
        b = self.project_txt(h_txt) + self.type_embedding[1]
        seq = self.encoder(nx.stack([a, b], axis=1))
        return self.output(seq.mean(axis=1))[:, 0]

    def __call__(self, h_tab, h_txt) -> Tensor:
        return sigmoid_clamped(self.logit(h_tab, h_txt))


def fuse_predict(h_tab, h_txt, head: FusionHead) -> np.ndarray:
    with nx.no_grad():
        return head(np.atleast_2d(h_tab), np.atleast_2d(h_txt)).data


@dataclass
class ModelInputs:
    tabular: TabularBatch
    tokens: list[list[int]]

    def __len__(self) -> int:
        return len(self.tokens)

    def take(self, idx) -> "ModelInputs":
        idx = np.asarray(idx)
        return ModelInputs(self.tabular.take(idx), [self.tokens[i] for i in idx])


class PedCaModel(Module):
    def __init__(self, schema: Sequence[FeatureSpec], config: TrainConfig, vocab: Vocabulary,
                 preprocessor: TabularPreprocessor, rng: np.random.Generator | None = None):
        check_text_schema(schema)
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self._schema = tuple(schema)
        self._config = config
        self._vocab = vocab
        self._preprocessor = preprocessor
        zero = config.zero_residual
        # one stream per submodule: the tabular view and head get the same init in every mode
        tab_rng, txt_rng, head_rng = rng.spawn(3)
        self.tabular = TabularTransformer(tab_rng, schema, config.d, config.n_layers, config.n_heads, zero)
        self.textual = TextualEncoder(txt_rng, len(vocab), config.d_txt, config.n_layers_txt, config.n_heads_txt,
                                      config.max_sequence_length, zero)
        self.head = FusionHead(head_rng, config.d, config.d_txt, config.d_fusion, config.n_layers_fusion,
                               config.n_heads_fusion, zero)

    @property
    def schema(self) -> tuple[FeatureSpec, ...]:
        return self._schema

    @property
    def config(self) -> TrainConfig:
        return self._config

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    def preprocessor(self) -> TabularPreprocessor:
        return self._preprocessor

    @property
    def schema_hash(self) -> str:
        return schema_hash(self._schema)

    def prepare(self, records: Sequence[PatientRecord]) -> ModelInputs:
        """Window to tau, aggregate/standardize the tabular view and tokenize the text view."""
        windowed = [filter_window(r, self._config.tau) for r in records]
        tab = self._preprocessor.transform(windowed)
        if self._config.mode == "tabular-only":
            tokens = [[0] for _ in windowed]
        else:
            tokens = [
                tokenize(assemble_document(r, self._schema), self._vocab, self._config.max_sequence_length)
                for r in windowed
            ]
        return ModelInputs(tab, tokens)

    def encode_tabular(self, batch: TabularBatch) -> Tensor:
        """h_tab (B, d); zeros when the tabular view is bypassed."""
        if self._config.mode == "textual-only":
            return Tensor(np.zeros((len(batch), self._config.d)))
        return self.tabular(batch)

    def encode_text(self, tokens: Sequence[Sequence[int]]) -> Tensor:
        """h_txt (B, d_txt); zeros when the textual view is bypassed."""
        if self._config.mode == "tabular-only":
            return Tensor(np.zeros((len(tokens), self._config.d_txt)))
        ids, mask = pad_batch(tokens)
        return self.textual(ids, mask)

    def forward(self, inputs: ModelInputs) -> Tensor:
        """CA probabilities (B,)."""
        return self.head(self.encode_tabular(inputs.tabular), self.encode_text(inputs.tokens))

    def predict_inputs(self, inputs: ModelInputs, batch_size: int = 128) -> np.ndarray:
        out = np.empty(len(inputs))
        with nx.no_grad():
            for start in range(0, len(inputs), batch_size):
                idx = np.arange(start, min(start + batch_size, len(inputs)))
                out[idx] = self.forward(inputs.take(idx)).data
        return out

    def predict_proba(self, records: Sequence[PatientRecord], batch_size: int = 128) -> np.ndarray:
        if not records:
            return np.empty(0)
        return self.predict_inputs(self.prepare(records), batch_size)


def forward(record: PatientRecord, model: PedCaModel) -> float:
    return float(model.predict_proba([record])[0])


def build_model(records: Sequence[PatientRecord], schema: Sequence[FeatureSpec], config: TrainConfig) -> PedCaModel:
    """Fit vocabulary and standardization on ``records`` and initialise parameters."""
    windowed = [filter_window(r, config.tau) for r in records]
    preprocessor = TabularPreprocessor(schema).fit(windowed)
    if config.mode == "tabular-only":
        vocab = Vocabulary([])
    else:
        vocab = build_vocab([assemble_document(r, schema) for r in windowed])
    init_seed, _ = np.random.SeedSequence(config.seed).spawn(2)
    return PedCaModel(schema, config, vocab, preprocessor, np.random.default_rng(init_seed))


def batch_loss(model: PedCaModel, inputs: ModelInputs, labels: np.ndarray, gamma: float) -> Tensor:
    return focal_loss(model.forward(inputs), labels, gamma).mean()


def parameter_groups(model: PedCaModel) -> list[tuple[dict[str, Tensor], float, float]]:
    """Split parameters into (params, lr, eps) optimizer groups.

    The tabular embedder gets a large lr with a large eps, which makes its update close to
    plain SGD: per-feature gradients are scaled down by the attention average over all
    feature tokens and Adam's normalization would otherwise move noise features as fast as
    informative ones. The text encoder and its projection in the head train slowly so the
    text view cannot memorise the training labels before the tabular view has learned.
    """
    cfg = model.config
    embedding, text, rest = {}, {}, {}
    for name, p in model.named_parameters().items():
        if name.startswith("tabular.embedder."):
            embedding[name] = p
        elif name.startswith(("textual.", "head.project_txt.")):
            text[name] = p
        else:
            rest[name] = p
    return [
        (embedding, cfg.embedding_lr, cfg.embedding_eps),
        (text, cfg.text_lr, cfg.adam_eps),
        (rest, cfg.lr, cfg.adam_eps),
    ]


def train(records: Sequence[PatientRecord], schema: Sequence[FeatureSpec], config: TrainConfig,
          progress=None) -> tuple[PedCaModel, list[float]]:
    """Mini-batch Adam on mean focal loss; returns the model and per-epoch mean loss."""
    labels = np.array([r.label for r in records], dtype=np.float64)
    if labels.size == 0 or labels.min() == labels.max():
        raise TrainingError("training set needs at least one positive and one negative example")
    model = build_model(records, schema, config)
    inputs = model.prepare(records)
    groups = [(params, lr, eps, AdamState(params)) for params, lr, eps in parameter_groups(model)]
    _, shuffle_seed = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    history = []
    n = len(records)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = batch_loss(model, inputs.take(idx), labels[idx], config.gamma)
            loss.backward()
            for params, lr, eps, state in groups:
                adam_step(params, {k: p.grad for k, p in params.items()}, state, lr=lr, eps=eps)
            model.zero_grad()
            total += loss.item() * len(idx)
        history.append(total / n)
        if progress is not None:
            progress(epoch, history[-1], model)
    return model, history


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: PedCaModel, path: str | Path) -> None:
    """Self-describing JSON container (format/version, schema + hash, vocab, stats, parameters)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "schema_hash": model.schema_hash,
        "schema": [s.to_json() for s in model.schema],
        "config": model.config.to_dict(),
        "vocabulary": model.vocab.to_json(),
        "standardization": model.preprocessor.state(),
        "parameters": {
            name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in model.named_parameters().items()
        },
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path, expected_schema_hash: str | None = None) -> PedCaModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    schema = tuple(FeatureSpec.from_json(s) for s in payload["schema"])
    if schema_hash(schema) != payload["schema_hash"]:
        raise ConfigError(f"{path}: schema hash does not match stored schema")
    if expected_schema_hash is not None and expected_schema_hash != payload["schema_hash"]:
        raise SchemaMismatchError("checkpoint schema hash does not match the cohort schema")
    config = TrainConfig.from_dict(payload["config"])
    preprocessor = TabularPreprocessor(schema)
    preprocessor.load_state(payload["standardization"])
    model = PedCaModel(schema, config, Vocabulary.from_json(payload["vocabulary"]), preprocessor,
                       np.random.default_rng(0))
    params = model.named_parameters()
    stored = payload["parameters"]
    if set(stored) != set(params):
        raise ConfigError(f"{path}: parameter set does not match the model architecture")
    for name, p in params.items():
        arr = np.array(stored[name]["data"], dtype=np.float64).reshape(stored[name]["shape"])
        if arr.shape != p.shape:
            raise ConfigError(f"{path}: shape mismatch for {name}")
        p.data[...] = arr
    return model
