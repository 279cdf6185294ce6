"""Tabular view: LAST aggregation, per-feature embeddings and the feature-token transformer."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .cohort import FeatureSpec, Observation, PatientRecord, filter_window
from .layers import Module, TransformerEncoder
from .numerics import Tensor

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6


def aggregate_last(series: Sequence[Observation]):
    """Value at the maximal timestamp, or None for an empty series."""
    if not series:
        return None
    return series[-1].value


def raw_value(record: PatientRecord, spec: FeatureSpec):
    if spec.kind == "static":
        return record.static_values.get(spec.name)
    return aggregate_last(record.series(spec.name))


def feature_order(schema: Sequence[FeatureSpec]) -> tuple[list[FeatureSpec], list[FeatureSpec]]:
    """Numeric block then categorical block, each in schema order."""
    return [s for s in schema if s.is_numeric], [s for s in schema if not s.is_numeric]


@dataclass
class TabularBatch:
    values: np.ndarray  # (B, n_num) standardized, 0 where missing
    observed: np.ndarray  # (B, n_num) 1.0 where present
    categories: np.ndarray  # (B, n_cat) row index into each feature's table

    def __len__(self) -> int:
        return self.values.shape[0]

    def take(self, idx) -> "TabularBatch":
        return TabularBatch(self.values[idx], self.observed[idx], self.categories[idx])


class TabularPreprocessor:
    """Training-fold standardization statistics and categorical vocabularies."""

    def __init__(self, schema: Sequence[FeatureSpec]):
        self.schema = tuple(schema)
        self.numeric, self.categorical = feature_order(self.schema)
        self.mean = np.zeros(len(self.numeric))
        self.std = np.ones(len(self.numeric))
        # categories seen in the training fold; others fall into the missing slot
        self.seen: list[list[str]] = [list(s.categories) for s in self.categorical]

    def fit(self, records: Sequence[PatientRecord]) -> "TabularPreprocessor":
        for j, spec in enumerate(self.numeric):
            vals = [float(v) for r in records if (v := raw_value(r, spec)) is not None]
            if vals:
                self.mean[j] = float(np.mean(vals))
                self.std[j] = max(float(np.std(vals)), STD_FLOOR)
            else:
                self.mean[j], self.std[j] = 0.0, 1.0
        for j, spec in enumerate(self.categorical):
            present = {raw_value(r, spec) for r in records}
            self.seen[j] = [c for c in spec.categories if c in present]
        return self

    def transform(self, records: Sequence[PatientRecord]) -> TabularBatch:
        n = len(records)
        values = np.zeros((n, len(self.numeric)))
        observed = np.zeros((n, len(self.numeric)))
        cats = np.zeros((n, len(self.categorical)), dtype=np.int64)
        lookups = [
            {c: spec.categories.index(c) for c in seen} for spec, seen in zip(self.categorical, self.seen)
        ]
        unknown = 0
        for i, r in enumerate(records):
            for j, spec in enumerate(self.numeric):
                v = raw_value(r, spec)
                if v is not None:
                    values[i, j] = (float(v) - self.mean[j]) / self.std[j]
                    observed[i, j] = 1.0
            for j, spec in enumerate(self.categorical):
                v = raw_value(r, spec)
                slot = len(spec.categories)
                if v is not None:
                    idx = lookups[j].get(v)
                    if idx is None:
                        unknown += 1
                    else:
                        slot = idx
                cats[i, j] = slot
        if unknown:
            log.debug("%d categorical values unseen in training mapped to the missing slot", unknown)
        return TabularBatch(values, observed, cats)

    def state(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "seen": self.seen}

    def load_state(self, state: dict) -> None:
        self.mean = np.array(state["mean"], dtype=np.float64)
        self.std = np.array(state["std"], dtype=np.float64)
        self.seen = [list(s) for s in state["seen"]]


class TabularEmbedder(Module):
    """Per-feature dense embeddings e_i = xi_i(x_i) + b_i plus a readout token."""

    def __init__(self, rng: np.random.Generator, schema: Sequence[FeatureSpec], d: int):
        numeric, categorical = feature_order(schema)
        self.d = d
        self._sizes = [len(s.categories) + 1 for s in categorical]  # last row = missing slot
        self._offsets = np.concatenate([[0], np.cumsum(self._sizes)[:-1]]).astype(np.int64)
        scale = 1.0 / np.sqrt(d)
        self.numeric_weight = nx.parameter(rng.normal(0.0, scale, size=(len(numeric), d)))
        self.numeric_missing = nx.parameter(rng.normal(0.0, scale, size=(len(numeric), d)))
        self.category_table = nx.parameter(rng.normal(0.0, scale, size=(int(sum(self._sizes)), d)))
        self.bias = nx.parameter(np.zeros((len(numeric) + len(categorical), d)))
        self.readout = nx.parameter(rng.normal(0.0, scale, size=d))

    @property
    def n_numeric(self) -> int:
        return self.numeric_weight.shape[0]

    def category_rows(self, j: int) -> np.ndarray:
        """Rows of the j-th categorical feature's lookup table (c_j x d)."""
        start = self._offsets[j]
        return self.category_table.data[start : start + self._sizes[j]]

    def embed_feature(self, index: int, value: float | int | None) -> Tensor:
        """Embedding for one feature in numeric-then-categorical order.

        Numeric features take a standardized value (or None); categorical
        features take a table row index (or None for the missing slot).
        """
        k = self.n_numeric
        if index < k:
            if value is None:
                return self.numeric_missing[index] + self.bias[index]
            return self.numeric_weight[index] * float(value) + self.bias[index]
        j = index - k
        row = self._sizes[j] - 1 if value is None else int(value)
        return nx.embedding(self.category_table, np.array([self._offsets[j] + row]))[0] + self.bias[index]

    def __call__(self, batch: TabularBatch) -> Tensor:
        """(B, 1 + n_features, d): readout row first, then numeric, then categorical."""
        b = len(batch)
        parts = [nx.add(Tensor(np.zeros((b, 1, self.d))), self.readout)]
        k = self.n_numeric
        if k:
            e_num = nx.mul(Tensor(batch.values[:, :, None]), self.numeric_weight)
            e_num = e_num + nx.mul(Tensor((1.0 - batch.observed)[:, :, None]), self.numeric_missing)
            parts.append(e_num + self.bias[:k])
        if batch.categories.shape[1]:
            e_cat = nx.embedding(self.category_table, batch.categories + self._offsets[None, :])
            parts.append(e_cat + self.bias[k:])
        return nx.concat(parts, axis=1)


def stack_embeddings(embeddings: Sequence[Tensor], readout: Tensor) -> Tensor:
    """Rows: readout token, then each feature embedding in the given order."""
    return nx.stack([readout, *embeddings], axis=0)


def encode(e: Tensor, encoder: TransformerEncoder) -> Tensor:
    """Apply the encoder to one (n, d) sequence or a (B, n, d) batch."""
    if e.ndim == 2:
        return encoder(e.reshape(1, *e.shape))[0]
    return encoder(e)


class TabularTransformer(Module):
    def __init__(self, rng: np.random.Generator, schema: Sequence[FeatureSpec], d: int = 32,
                 n_layers: int = 2, n_heads: int = 4, zero_residual: bool = False):
        self.embedder = TabularEmbedder(rng, schema, d)
        self.encoder = TransformerEncoder(rng, d, n_layers, n_heads, norm_first_input=False,
                                          zero_residual=zero_residual)

    def __call__(self, batch: TabularBatch) -> Tensor:
        """h_tab (B, d): final readout-token row."""
        e = self.embedder(batch)
        return self.encoder(e, readout_only=True)[:, 0, :]


def tabular_encode(record: PatientRecord, model: TabularTransformer, pre: TabularPreprocessor,
                   tau: float | None = None) -> np.ndarray:
    if tau is not None:
        record = filter_window(record, tau)
    with nx.no_grad():
        return model(pre.transform([record])).data[0]
