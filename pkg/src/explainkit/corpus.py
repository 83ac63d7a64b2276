"""Dataset schemas, file ingestion, and input/output template construction.

Two sample families are supported: multiple-choice QA (one question, K
options, optional per-option evidence and a free-text explanation) and NLI
(premise/hypothesis with a 3-way label and reference explanations).

All template strings rendered here are byte-exact and documented in
FORMATS.md at the repository root.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import FormatError, IngestionError, RetrievalError, SchemaError

NLI_LABELS = ("entailment", "neutral", "contradiction")

CLASSIFIER_MODES = ("qa_only", "qa_evidence", "qa_explanation", "probe_test")

EXPLANATION_PREFIX = "My commonsense tells me that "
ANSWER_PREFIX = "The answer is "
MIXED_SOURCE_PREFIX = "explanation "
CONTEXT_MARKER = " reference: "


def normalize_ws(text: str) -> str:
    """Collapse runs of whitespace to single spaces and strip the ends."""
    return " ".join(text.split())


@dataclass(frozen=True)
class SegmentSymbols:
    """Segmentation symbols joined into classifier inputs by single spaces.

    The literal defaults can be overridden to match an external
    pre-trained tokenizer's conventions.
    """

    cls: str = "[CLS]"
    sep: str = "[SEP]"
    eos: str = "[EOS]"


DEFAULT_SYMBOLS = SegmentSymbols()


@dataclass
class McqaSample:
    """One multiple-choice QA instance."""

    id: str
    question: str
    options: list[str]
    answer_index: int
    evidence: Optional[list[str]] = None
    question_context: Optional[str] = None
    explanation: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.options:
            raise SchemaError(f"sample {self.id}: options must be non-empty")
        if not 0 <= self.answer_index < len(self.options):
            raise SchemaError(
                f"sample {self.id}: answer_index {self.answer_index} out of "
                f"range for {len(self.options)} options"
            )
        if self.evidence is not None and len(self.evidence) != len(self.options):
            raise SchemaError(
                f"sample {self.id}: evidence count {len(self.evidence)} != "
                f"option count {len(self.options)}"
            )

    @property
    def num_options(self) -> int:
        return len(self.options)

    @property
    def answer_text(self) -> str:
        return self.options[self.answer_index]


@dataclass
class NliSample:
    """One premise/hypothesis pair with reference explanations."""

    id: str
    premise: str
    hypothesis: str
    label: str
    explanations: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.label not in NLI_LABELS:
            raise SchemaError(f"sample {self.id}: unknown label {self.label!r}")

    @property
    def label_index(self) -> int:
        return NLI_LABELS.index(self.label)

    @property
    def bleu_references(self) -> list[str]:
        """At most the first two explanations serve as BLEU references."""
        return self.explanations[:2]


@dataclass(frozen=True)
class ClassifierInstance:
    """A rendered classifier input for one option (or one NLI pair)."""

    option_index: int
    input_text: str
    label: int


@dataclass(frozen=True)
class GeneratorInstance:
    """A rendered source/target pair for the text generator."""

    source_text: str
    target_text: str
    has_explanation: bool


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

_MCQA_REQUIRED = ("id", "question", "options", "answer_index")
_MCQA_OPTIONAL = ("evidence", "question_context", "explanation")


def mcqa_from_dict(record: dict) -> McqaSample:
    missing = [k for k in _MCQA_REQUIRED if k not in record]
    if missing:
        raise SchemaError(f"record missing keys: {missing}")
    unknown = set(record) - set(_MCQA_REQUIRED) - set(_MCQA_OPTIONAL)
    if unknown:
        raise SchemaError(f"record has unknown keys: {sorted(unknown)}")
    return McqaSample(
        id=str(record["id"]),
        question=record["question"],
        options=list(record["options"]),
        answer_index=int(record["answer_index"]),
        evidence=list(record["evidence"]) if record.get("evidence") is not None else None,
        question_context=record.get("question_context"),
        explanation=record.get("explanation"),
    )


def mcqa_to_dict(sample: McqaSample) -> dict:
    record = asdict(sample)
    return {k: v for k, v in record.items() if v is not None}


def load_cme_jsonl(path: str | Path) -> list[McqaSample]:
    """Load a CME-style JSONL file (one JSON object per line, UTF-8).

    The option count K must be constant across the file (5 for CME data).
    """
    samples: list[McqaSample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                samples.append(mcqa_from_dict(record))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    option_counts = {s.num_options for s in samples}
    if len(option_counts) > 1:
        raise SchemaError(
            f"{path}: inconsistent option counts across file: {sorted(option_counts)}"
        )
    return samples


def write_mcqa_jsonl(samples: Iterable[McqaSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(mcqa_to_dict(sample), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


_NLI_REQUIRED = ("id", "premise", "hypothesis", "label")
_NLI_OPTIONAL = ("explanations",)


def nli_from_dict(record: dict) -> NliSample:
    missing = [k for k in _NLI_REQUIRED if k not in record]
    if missing:
        raise SchemaError(f"record missing keys: {missing}")
    unknown = set(record) - set(_NLI_REQUIRED) - set(_NLI_OPTIONAL)
    if unknown:
        raise SchemaError(f"record has unknown keys: {sorted(unknown)}")
    return NliSample(
        id=str(record["id"]),
        premise=record["premise"],
        hypothesis=record["hypothesis"],
        label=record["label"],
        explanations=list(record.get("explanations") or []),
    )


def nli_to_dict(sample: NliSample) -> dict:
    return asdict(sample)


def write_nli_jsonl(samples: Iterable[NliSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(nli_to_dict(sample), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def load_nli_jsonl(path: str | Path) -> list[NliSample]:
    """Load normalized NLI samples (one JSON object per line, UTF-8)."""
    samples: list[NliSample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                samples.append(nli_from_dict(record))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return samples


def load_samples_jsonl(path: str | Path, task: str) -> list:
    """Task-dispatching loader for normalized JSONL files."""
    if task == "mcqa":
        return load_cme_jsonl(path)
    if task == "nli":
        return load_nli_jsonl(path)
    raise SchemaError(f"unknown task {task!r}")


def esnli_explanation_leaks_input(sample: NliSample) -> bool:
    """True when any explanation contains the whole premise or hypothesis.

    Containment is case-sensitive verbatim substring matching after
    whitespace normalization.
    """
    premise = normalize_ws(sample.premise)
    hypothesis = normalize_ws(sample.hypothesis)
    for explanation in sample.explanations:
        normalized = normalize_ws(explanation)
        if premise and premise in normalized:
            return True
        if hypothesis and hypothesis in normalized:
            return True
    return False


def filter_esnli_train(samples: Sequence[NliSample]) -> list[NliSample]:
    """Drop training samples whose explanation leaks the premise/hypothesis."""
    return [s for s in samples if not esnli_explanation_leaks_input(s)]


_ESNLI_LABEL_ALIASES = {label: label for label in NLI_LABELS}


def _read_delimited(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        head = fh.readline()
        delimiter = "\t" if "\t" in head else ","
        fh.seek(0)
        return list(csv.DictReader(fh, delimiter=delimiter))


def _load_esnli_split(path: str | Path) -> list[NliSample]:
    rows = _read_delimited(path)
    required = ("pairID", "gold_label", "Sentence1", "Sentence2", "Explanation_1")
    samples = []
    for lineno, row in enumerate(rows, start=2):
        missing = [c for c in required if c not in row]
        if missing:
            raise IngestionError(f"{path}: missing columns {missing}")
        label = row["gold_label"].strip()
        if label not in _ESNLI_LABEL_ALIASES:
            raise SchemaError(f"{path}:{lineno}: unknown label {label!r}")
        explanations = []
        for col in ("Explanation_1", "Explanation_2", "Explanation_3"):
            value = (row.get(col) or "").strip()
            if value:
                explanations.append(value)
        samples.append(
            NliSample(
                id=row["pairID"],
                premise=row["Sentence1"] or "",
                hypothesis=row["Sentence2"] or "",
                label=label,
                explanations=explanations[:3],
            )
        )
    return samples


def load_esnli(
    train_path: str | Path, dev_path: str | Path, test_path: str | Path
) -> tuple[list[NliSample], list[NliSample], list[NliSample]]:
    """Load the three e-SNLI splits from their public CSV layout.

    Training samples whose explanation contains the entire premise or
    hypothesis verbatim are dropped; dev/test keep all rows.
    """
    train = filter_esnli_train(_load_esnli_split(train_path))
    dev = _load_esnli_split(dev_path)
    test = _load_esnli_split(test_path)
    return train, dev, test


_COSE_OPTION_COUNTS = {"v1.0": 3, "v1.11": 5}
_COSE_EXPLANATION_COLUMNS = ("explanation", "human_expl_open-ended", "open-ended")


def load_cose(path: str | Path, version: str) -> list[McqaSample]:
    """Load a CoS-E-format CSV for the given version (v1.0 or v1.11)."""
    if version not in _COSE_OPTION_COUNTS:
        raise SchemaError(f"unknown CoS-E version {version!r}")
    expected_k = _COSE_OPTION_COUNTS[version]
    rows = _read_delimited(path)
    samples = []
    for lineno, row in enumerate(rows, start=2):
        choice_cols = sorted(
            (c for c in row if c.startswith("choice_")), key=lambda c: int(c.split("_")[1])
        )
        if len(choice_cols) != expected_k:
            raise SchemaError(
                f"{path}:{lineno}: expected {expected_k} options for {version}, "
                f"found {len(choice_cols)}"
            )
        if "id" not in row or "question" not in row or "label" not in row:
            raise IngestionError(f"{path}: missing one of columns id/question/label")
        options = [row[c] for c in choice_cols]
        label = row["label"].strip()
        if label.isdigit():
            answer_index = int(label)
        elif label in options:
            answer_index = options.index(label)
        else:
            raise SchemaError(f"{path}:{lineno}: label {label!r} matches no option")
        explanation = None
        for col in _COSE_EXPLANATION_COLUMNS:
            if row.get(col):
                explanation = row[col]
                break
        samples.append(
            McqaSample(
                id=row["id"],
                question=row["question"],
                options=options,
                answer_index=answer_index,
                explanation=explanation,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


def build_classifier_inputs(
    sample: McqaSample | NliSample,
    mode: str = "qa_only",
    symbols: SegmentSymbols = DEFAULT_SYMBOLS,
    explanation: Optional[str] = None,
) -> list[ClassifierInstance]:
    """Render classifier inputs for one sample.

    MCQA yields one instance per option; NLI yields a single instance with
    the 3-way label. In ``probe_test`` mode the single (generated)
    explanation is attached to every option slot, since generation is
    question-level while the probe scores per option. ``explanation``
    overrides the sample's own explanation text when given.
    """
    if isinstance(sample, NliSample):
        text = " ".join(
            [symbols.cls, sample.premise, symbols.sep, sample.hypothesis, symbols.eos]
        )
        return [ClassifierInstance(0, text, sample.label_index)]

    if mode not in CLASSIFIER_MODES:
        raise FormatError(f"unknown classifier mode {mode!r}")
    explanation_text = explanation if explanation is not None else sample.explanation
    if mode == "qa_evidence" and not sample.evidence:
        raise FormatError(f"sample {sample.id}: mode qa_evidence requires evidence")
    if mode in ("qa_explanation", "probe_test") and not explanation_text:
        raise FormatError(f"sample {sample.id}: mode {mode} requires an explanation")

    instances = []
    for j, option in enumerate(sample.options):
        if mode == "qa_only":
            parts = [symbols.cls, sample.question, symbols.sep, option, symbols.eos]
        elif mode == "qa_evidence":
            parts = [
                symbols.cls, sample.question, option,
                symbols.sep, sample.evidence[j], symbols.eos,
            ]
        elif mode == "qa_explanation":
            parts = [
                symbols.cls, sample.question, option,
                symbols.sep, explanation_text, symbols.eos,
            ]
        else:  # probe_test: question removed, one explanation per option slot
            parts = [symbols.cls, option, symbols.sep, explanation_text, symbols.eos]
        instances.append(ClassifierInstance(j, " ".join(parts), sample.answer_index))
    return instances


def _mcqa_generator_source(sample: McqaSample) -> str:
    source = f"{sample.question} The options are " + " ".join(sample.options)
    if sample.question_context:
        source += CONTEXT_MARKER + sample.question_context
    return source


def build_generator_instance(
    sample: McqaSample | NliSample,
    supervision: str = "explained",
    task: str = "mcqa",
    mixed: bool = False,
) -> GeneratorInstance:
    """Render a generator source/target pair.

    ``mixed`` selects the mixed-supervision corpus templates: unexplained
    samples target "The answer is {gold option text}" with the source
    unchanged, while explained samples get the source prefixed with the
    word "explanation" and a combined answer+explanation target. In
    homogeneous (all-explained) corpora the target is the bare
    explanation template.
    """
    if supervision not in ("explained", "unexplained"):
        raise FormatError(f"unknown supervision {supervision!r}")

    if task == "nli":
        if not isinstance(sample, NliSample):
            raise FormatError("task nli requires an NliSample")
        source = f"nli {sample.premise} {sample.hypothesis}"
        gold_text = sample.label
        explanation = sample.explanations[0] if sample.explanations else None
    elif task == "mcqa":
        if not isinstance(sample, McqaSample):
            raise FormatError("task mcqa requires an McqaSample")
        source = _mcqa_generator_source(sample)
        gold_text = sample.answer_text
        explanation = sample.explanation
    else:
        raise FormatError(f"unknown task {task!r}")

    if supervision == "unexplained":
        return GeneratorInstance(source, ANSWER_PREFIX + gold_text, False)

    if not explanation:
        raise FormatError(
            f"sample {sample.id}: explained supervision requires an explanation"
        )
    if mixed:
        return GeneratorInstance(
            MIXED_SOURCE_PREFIX + source,
            f"{ANSWER_PREFIX}{gold_text}. {EXPLANATION_PREFIX}{explanation}",
            True,
        )
    return GeneratorInstance(source, EXPLANATION_PREFIX + explanation, True)


def strip_explanation_prefix(text: str) -> str:
    """Remove the explanation template prefix (and any answer prefix) if present."""
    if EXPLANATION_PREFIX in text:
        return text[text.index(EXPLANATION_PREFIX) + len(EXPLANATION_PREFIX):]
    return text


# ---------------------------------------------------------------------------
# Retrieval stub
# ---------------------------------------------------------------------------


def retrieve_question_context(
    question: str, corpus: Sequence[str], top_k: int = 1
) -> str:
    """Concatenate the top_k passages by token-overlap with the question.

    Score = |tokens(question) ∩ tokens(passage)| / |distinct tokens(passage)|,
    ties broken by corpus order. Deterministic lexical stand-in for the
    external evidence retriever.
    """
    if not corpus:
        raise RetrievalError("retrieval corpus is empty")
    if top_k < 1:
        raise RetrievalError(f"top_k must be >= 1, got {top_k}")
    question_tokens = set(normalize_ws(question).split())
    scored = []
    for index, passage in enumerate(corpus):
        passage_tokens = set(normalize_ws(passage).split())
        score = (
            len(question_tokens & passage_tokens) / len(passage_tokens)
            if passage_tokens
            else 0.0
        )
        scored.append((-score, index, passage))
    scored.sort(key=lambda item: (item[0], item[1]))
    return " ".join(passage for _, _, passage in scored[:top_k])
