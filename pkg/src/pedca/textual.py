"""Textual view: EHR textualization, word-level vocabulary and the [CLS]-readout encoder."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .cohort import ConfigError, FeatureSpec, Observation, PatientRecord, filter_window, format_number
from .layers import Module, TransformerEncoder
from .numerics import Tensor

MISSING_TEXT = "(missing)"
SECTION_HEADERS = {
    "demographics": "Demographics",
    "vitals": "Vitals",
    "assessments": "Assessments",
    "labs": "Labs",
    "medications": "Medications",
}
SECTION_ORDER = tuple(SECTION_HEADERS)

CLS, SEP, UNK, PAD = "[CLS]", "[SEP]", "[UNK]", "[PAD]"
SPECIAL_TOKENS = (CLS, SEP, UNK, PAD)
CLS_ID, SEP_ID, UNK_ID, PAD_ID = range(4)
DEFAULT_MAX_LEN = 512

# "--" and the separators become their own tokens; numbers stay whole.
TOKEN_RE = re.compile(r"--|-?\d+(?:\.\d+)?|[:;.()]|[^\s:;.()]+")


def format_value(spec: FeatureSpec, value) -> str:
    if isinstance(value, str):
        return value
    value = float(value)
    if spec.section == "vitals":
        value = round(value, 1)
    return format_number(value)


def textualize_static(spec: FeatureSpec, value) -> str:
    shown = MISSING_TEXT if value is None else format_value(spec, value)
    return f"{spec.name}: {shown}"


def textualize_temporal(spec: FeatureSpec, series: Sequence[Observation]) -> str:
    """Distinct categories in order of first appearance, or the numeric min--max range."""
    if not series:
        return ""
    if spec.is_numeric:
        values = [float(o.value) for o in series]
        return f"{spec.name}: {format_value(spec, min(values))}--{format_value(spec, max(values))}."
    distinct = list(dict.fromkeys(o.value for o in series))
    return f"{spec.name}: {'; '.join(distinct)}."


def lab_flags(spec: FeatureSpec, series: Sequence[Observation]) -> tuple[bool, bool]:
    """(any value above range, any value below range)."""
    if spec.reference_range is None:
        raise ConfigError(f"lab {spec.name!r} has no reference_range")
    low, high = spec.reference_range
    values = [float(o.value) for o in series]
    return any(v > high for v in values), any(v < low for v in values)


def labs_text(names: Sequence[str], flags: Sequence[tuple[bool, bool]]) -> str:
    high = [n for n, (h, _) in zip(names, flags) if h]
    low = [n for n, (_, lo) in zip(names, flags) if lo]
    parts = []
    if high:
        parts.append(f"(High) {'; '.join(high)}.")
    if low:
        parts.append(f"(Low) {'; '.join(low)}.")
    return " ".join(parts)


def textualize_labs(specs: Sequence[FeatureSpec], series: Mapping[str, Sequence[Observation]]) -> str:
    """Names of labs with any out-of-range value; in-range labs are dropped."""
    flags = [lab_flags(s, series.get(s.name, ())) for s in specs]
    return labs_text([s.name for s in specs], flags)


def is_lab(spec: FeatureSpec) -> bool:
    return spec.section == "labs" and spec.kind == "temporal"


def check_text_schema(schema: Sequence[FeatureSpec]) -> None:
    for spec in schema:
        if is_lab(spec) and (spec.reference_range is None or not spec.is_numeric):
            raise ConfigError(f"lab {spec.name!r} needs a numeric reference_range for textualization")


@dataclass
class DocumentParts:
    """Per-feature fragments of one document, before section assembly."""

    fragments: dict[str, str] = field(default_factory=dict)
    lab_flags: dict[str, tuple[bool, bool]] = field(default_factory=dict)


def document_parts(record: PatientRecord, schema: Sequence[FeatureSpec]) -> DocumentParts:
    parts = DocumentParts()
    for spec in schema:
        if spec.kind == "static":
            parts.fragments[spec.name] = textualize_static(spec, record.static_values.get(spec.name))
        elif is_lab(spec):
            parts.lab_flags[spec.name] = lab_flags(spec, record.series(spec.name))
        else:
            parts.fragments[spec.name] = textualize_temporal(spec, record.series(spec.name))
    return parts


def section_layout(schema: Sequence[FeatureSpec]) -> list[tuple[str, list[str]]]:
    """(section, feature names in schema order) for every section, in document order."""
    return [(sec, [s.name for s in schema if s.section == sec]) for sec in SECTION_ORDER]


def assemble_sections(parts: DocumentParts, schema: Sequence[FeatureSpec]) -> list[tuple[str, str]]:
    """(header, content) for every non-empty section, in document order."""
    sections = []
    for section, names in section_layout(schema):
        pieces = [parts.fragments[n] for n in names if parts.fragments.get(n)]
        if section == "labs":
            lab_names = [n for n in names if n in parts.lab_flags]
            flagged = labs_text(lab_names, [parts.lab_flags[n] for n in lab_names])
            if flagged:
                pieces.append(flagged)
        if pieces:
            sections.append((SECTION_HEADERS[section], " ".join(pieces)))
    return sections


def assemble_from_parts(parts: DocumentParts, schema: Sequence[FeatureSpec]) -> str:
    return " ".join(f"{header}: {content}" for header, content in assemble_sections(parts, schema))


def assemble_document(record: PatientRecord, schema: Sequence[FeatureSpec], tau: float | None = None) -> str:
    """Sectioned text: Demographics, Vitals, Assessments, Labs, Medications; empty sections dropped."""
    check_text_schema(schema)
    if tau is not None:
        record = filter_window(record, tau)
    return assemble_from_parts(document_parts(record, schema), schema)


@dataclass
class TextualizedDoc:
    text: str
    token_ids: list[int]
    sections: list[tuple[str, tuple[int, int]]]


def section_spans(sections: Sequence[tuple[str, str]]) -> list[tuple[str, tuple[int, int]]]:
    """Character span of each section block in the joined document."""
    spans = []
    pos = 0
    for header, content in sections:
        block = len(header) + 2 + len(content)
        spans.append((header, (pos, pos + block)))
        pos += block + 1
    return spans


def split_words(text: str) -> list[str]:
    return TOKEN_RE.findall(text)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def to_json(self) -> list[str]:
        return self.itos[len(SPECIAL_TOKENS):]

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens)


def build_vocab(documents: Sequence[str]) -> Vocabulary:
    """Every training token, ordered by frequency (desc) then lexicographically."""
    counts = Counter()
    for doc in documents:
        counts.update(split_words(doc))
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ordered])


def tokenize(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    """[CLS] + word ids, unknown words -> [UNK], truncated to ``max_len`` keeping the prefix."""
    ids = [CLS_ID]
    ids.extend(vocab.id(w) for w in split_words(text))
    return ids[:max_len]


def textualize_record(record: PatientRecord, schema: Sequence[FeatureSpec], vocab: Vocabulary,
                      max_len: int = DEFAULT_MAX_LEN, tau: float | None = None) -> TextualizedDoc:
    check_text_schema(schema)
    if tau is not None:
        record = filter_window(record, tau)
    sections = assemble_sections(document_parts(record, schema), schema)
    text = " ".join(f"{header}: {content}" for header, content in sections)
    return TextualizedDoc(text, tokenize(text, vocab, max_len), section_spans(sections))


def pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with [PAD]; returns ids (B, n) and key mask (B, n)."""
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


class TextualEncoder(Module):
    def __init__(self, rng: np.random.Generator, vocab_size: int, d: int = 32, n_layers: int = 2,
                 n_heads: int = 4, max_len: int = DEFAULT_MAX_LEN, zero_residual: bool = False):
        self.vocab_size = vocab_size
        self.max_len = max_len
        scale = 1.0 / np.sqrt(d)
        self.token_embedding = nx.parameter(rng.normal(0.0, scale, size=(vocab_size, d)))
        self.position_embedding = nx.parameter(rng.normal(0.0, 0.1 * scale, size=(max_len, d)))
        self.encoder = TransformerEncoder(rng, d, n_layers, n_heads, zero_residual=zero_residual)

    def __call__(self, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """[CLS] embeddings (B, d) for padded ids (B, n)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] < 1 or ids.shape[1] > self.max_len:
            raise ValueError(f"token batch must be (B, 1..{self.max_len}), got {ids.shape}")
        if ids.max() >= self.vocab_size or ids.min() < 0:
            raise ValueError(f"token id outside vocabulary of size {self.vocab_size}")
        n = ids.shape[1]
        x = nx.embedding(self.token_embedding, ids) + self.position_embedding[:n]
        return self.encoder(x, key_mask=mask, readout_only=True)[:, 0, :]


def textual_encode(token_ids: Sequence[int], encoder: TextualEncoder) -> np.ndarray:
    """h_txt for one tokenized document."""
    with nx.no_grad():
        return encoder(np.asarray([token_ids], dtype=np.int64)).data[0]
