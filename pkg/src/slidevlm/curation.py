"""Instruction-data pipeline: clean reports, generate captions and QA pairs,
filter text-answerable questions, split slides, and turn labels into VQA.

All chat traffic goes through a tiny client interface so every stage runs
against scripted mocks in tests and against a JSON-over-HTTP endpoint in
anger. Replies are cached by (template hash, input hash, model); re-running
a finished pipeline touches the cache only.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .evaluation import NARROW_BY_BROAD, NARROW_TO_BROAD, QARecord, extract_choice, option_letters
from .numerics import UsageError, stream
from .prompts import (
    GENERAL_PROMPT,
    OBJECTIVE_TEMPLATE,
    SYSTEM_PROMPT,
    TEMPLATE_HASHES,
    caption_prompt,
    label_question,
    qa_prompt,
    report_clean_prompt,
    template_hash,
)


class ClientError(RuntimeError):
    """A chat call failed for good, retries included."""


class ChatClient(Protocol):
    model: str

    def complete(self, prompt: str, temperature: float = 0.0) -> str: ...


# -- clients ------------------------------------------------------------------------


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    auth_env: str = "CHAT_API_TOKEN"
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    backoff_cap: float = 30.0


class LiveChatClient:
    """Chat-completion endpoint speaking the usual JSON contract.

    Failures retry with exponential backoff up to the configured cap, then
    raise ClientError.
    """

    def __init__(self, config: EndpointConfig):
        import os

        import requests

        self._requests = requests
        self.config = config
        self.model = config.model
        token = os.environ.get(config.auth_env, "")
        self._headers = {"Content-Type": "application/json"}
        if token:
            self._headers["Authorization"] = f"Bearer {token}"

    def complete(self, prompt: str, temperature: float = 0.0) -> str:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                delay = min(self.config.backoff_cap, self.config.backoff_base * 2 ** (attempt - 1))
                time.sleep(delay)
            try:
                resp = self._requests.post(
                    url, json=payload, headers=self._headers, timeout=self.config.timeout
                )
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:  # noqa: BLE001 - every failure mode retries the same way
                last = exc
        raise ClientError(f"chat call failed after {self.config.max_retries + 1} attempts: {last}")


class MockChatClient:
    """Scripted stand-in: reply sequence, prompt table, or replay file.

    A None reply in the sequence simulates a dead endpoint and raises
    ClientError, which is how tests exercise the flag-and-continue path.
    """

    def __init__(
        self,
        replies: Sequence[str | None] | None = None,
        table: dict[str, str] | None = None,
        default: str | None = None,
        model: str = "mock",
    ):
        self.replies = list(replies) if replies is not None else None
        self.table = dict(table) if table is not None else None
        self.default = default
        self.model = model
        self.calls: list[str] = []

    @classmethod
    def from_replay(cls, path, model: str = "replay") -> "MockChatClient":
        """Replay file: JSON object mapping sha256(prompt) to reply."""
        with open(path, encoding="utf-8") as fh:
            by_hash = json.load(fh)
        client = cls(model=model)
        client._by_hash = by_hash
        return client

    def complete(self, prompt: str, temperature: float = 0.0) -> str:
        self.calls.append(prompt)
        by_hash = getattr(self, "_by_hash", None)
        if by_hash is not None:
            key = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
            if key not in by_hash:
                raise ClientError(f"no replay entry for prompt hash {key[:12]}")
            return by_hash[key]
        if self.table is not None and prompt in self.table:
            return self.table[prompt]
        if self.replies is not None:
            if not self.replies:
                raise ClientError("mock reply sequence exhausted")
            reply = self.replies.pop(0)
            if reply is None:
                raise ClientError("mock scripted failure")
            return reply
        if self.default is not None:
            return self.default
        raise ClientError("mock has no reply for this prompt")


# -- reply cache --------------------------------------------------------------------


class PromptCache:
    """One JSON file per (template hash, input hash, model) triple.

    Writes are serialized behind a lock so parallel stages never interleave
    a partial file; the entry stores its own key fields for inspection.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    @staticmethod
    def _key(template_h: str, input_h: str, model: str) -> str:
        raw = f"{template_h}\n{input_h}\n{model}".encode("utf-8")
        return hashlib.sha256(raw).hexdigest()

    def _path(self, template_h: str, input_h: str, model: str) -> Path:
        return self.root / (self._key(template_h, input_h, model) + ".json")

    def lookup(self, template_h: str, input_h: str, model: str) -> str | None:
        path = self._path(template_h, input_h, model)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)["reply"]

    def store(self, template_h: str, input_h: str, model: str, reply: str) -> None:
        entry = {
            "template_hash": template_h,
            "input_hash": input_h,
            "model": model,
            "reply": reply,
        }
        path = self._path(template_h, input_h, model)
        with self._lock:
            tmp = path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(entry, fh, sort_keys=True)
            tmp.replace(path)


def _input_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _call(
    client: ChatClient,
    cache: PromptCache | None,
    template_h: str,
    input_text: str,
    prompt: str,
    temperature: float = 0.0,
) -> str:
    input_h = _input_hash(input_text)
    if cache is not None:
        hit = cache.lookup(template_h, input_h, client.model)
        if hit is not None:
            return hit
    reply = client.complete(prompt, temperature=temperature)
    if cache is not None:
        cache.store(template_h, input_h, client.model, reply)
    return reply


# -- pipeline records ---------------------------------------------------------------


@dataclass
class ReportRecord:
    """One pathology report and the slides it describes."""

    patient_id: str
    report_text: str
    slide_ids: list[str]
    cleaned: str | None = None

    def __post_init__(self):
        if not self.slide_ids:
            raise UsageError(f"report {self.patient_id!r} links no slides")


@dataclass
class QACandidate:
    """A generated question before filtering, with its provenance."""

    record: QARecord
    reasoning: str | None
    source_report: str
    prompt_hash: str


@dataclass
class DropReason:
    item: int
    reason: str
    payload: str


@dataclass
class FilterVerdict:
    """Text-only ensemble outcome; kept iff fewer than 3 of 4 were right."""

    correct: tuple[bool, bool, bool, bool]
    failed: tuple[bool, bool, bool, bool]
    kept: bool
    reason: str


# -- chat stages --------------------------------------------------------------------


def clean_report(record: ReportRecord, client: ChatClient, cache: PromptCache | None = None) -> str:
    """Strip boilerplate from one report via the pinned cleaning template."""
    if not record.report_text.strip():
        raise UsageError(f"report {record.patient_id!r} is empty")
    reply = _call(
        client,
        cache,
        TEMPLATE_HASHES["report_clean"],
        record.report_text,
        report_clean_prompt(record.report_text),
    )
    return reply.strip()


def _one_paragraph(text: str) -> str:
    lines = [ln.strip() for ln in text.splitlines()]
    return " ".join(ln for ln in lines if ln)


def gen_caption(cleaned: str, client: ChatClient, cache: PromptCache | None = None) -> str:
    """Summarize a cleaned report; multi-paragraph replies collapse to one."""
    if not cleaned.strip():
        raise UsageError("cannot caption an empty report")
    reply = _call(
        client, cache, TEMPLATE_HASHES["caption"], cleaned, caption_prompt(cleaned)
    )
    return _one_paragraph(reply)


QA_TEMPLATE_HASH = template_hash(
    SYSTEM_PROMPT + "\n" + OBJECTIVE_TEMPLATE + "\n" + GENERAL_PROMPT
)

_FENCE_RE = re.compile(r"```[a-zA-Z]*\n?|```")

_QTYPE_MAP = {
    "multi-choice questions": "multi-choice",
    "multi-choice": "multi-choice",
    "short-answer questions": "short-answer",
    "short-answer": "short-answer",
}


def _json_objects(text: str) -> list[str]:
    """Balanced top-level {...} spans; tolerates prose and code fences."""
    text = _FENCE_RE.sub("", text)
    spans = []
    depth = 0
    start = None
    in_string = False
    escape = False
    for i, ch in enumerate(text):
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth:
            depth -= 1
            if depth == 0:
                spans.append(text[start : i + 1])
    return spans


def _candidate_from_item(
    raw: dict,
    broad: str,
    source_report: str,
    slide_id: str,
    seq: int,
    prompt_h: str,
) -> QACandidate | str:
    """Validate one parsed item; returns the candidate or a drop reason."""
    qtype_raw = raw.get("question type")
    qtype = _QTYPE_MAP.get(qtype_raw if isinstance(qtype_raw, str) else "")
    if qtype is None:
        return f"unknown question type {qtype_raw!r}"
    question = raw.get("question")
    if not isinstance(question, str) or not question.strip():
        return "missing question text"
    narrow = raw.get("narrow category")
    if not isinstance(narrow, str) or narrow not in NARROW_TO_BROAD:
        return f"missing or unknown narrow category {narrow!r}"
    if NARROW_TO_BROAD[narrow] != broad:
        return f"narrow category {narrow!r} outside requested broad {broad!r}"
    reported_broad = raw.get("broad category")
    if reported_broad != broad:
        return f"broad category {reported_broad!r} does not match request {broad!r}"
    options = raw.get("options")
    if not isinstance(options, list) or not all(isinstance(o, str) for o in options):
        return "options must be a list of strings"
    answer = raw.get("answer")
    if not isinstance(answer, str) or not answer.strip():
        return "missing answer"
    if qtype == "multi-choice":
        if len(options) != 4:
            return f"multi-choice needs exactly 4 options, got {len(options)}"
        letter = extract_choice(answer, options)
        if letter is None:
            return f"answer {answer!r} does not resolve to one option"
        answer = letter
    else:
        if options:
            return "short-answer item carries options"
    reasoning = raw.get("reasoning")
    record = QARecord(
        id=f"{source_report}-{broad.lower()}-{seq:03d}",
        slide_id=slide_id,
        question=question.strip(),
        options=list(options),
        answer=answer,
        qtype=qtype,
        broad=broad,
        narrow=narrow,
    )
    return QACandidate(
        record=record,
        reasoning=reasoning if isinstance(reasoning, str) else None,
        source_report=source_report,
        prompt_hash=prompt_h,
    )


def gen_qas(
    cleaned: str,
    broad: str,
    client: ChatClient,
    cache: PromptCache | None = None,
    source_report: str = "report",
    slide_id: str = "",
) -> tuple[list[QACandidate], list[DropReason]]:
    """Generate QA candidates for one broad category of one cleaned report.

    Every JSON object in the reply is validated independently; malformed
    ones come back as DropReasons instead of killing the batch.
    """
    if broad not in NARROW_BY_BROAD:
        raise UsageError(f"unknown broad category {broad!r}")
    if not cleaned.strip():
        raise UsageError("cannot generate questions from an empty report")
    reply = _call(
        client,
        cache,
        QA_TEMPLATE_HASH,
        cleaned + "\n" + broad,
        qa_prompt(cleaned, broad),
    )
    candidates: list[QACandidate] = []
    drops: list[DropReason] = []
    spans = _json_objects(reply)
    if not spans:
        drops.append(DropReason(0, "no JSON objects in reply", reply[:200]))
        return candidates, drops
    for index, span in enumerate(spans):
        try:
            raw = json.loads(span)
        except json.JSONDecodeError as exc:
            drops.append(DropReason(index, f"invalid JSON: {exc}", span[:200]))
            continue
        result = _candidate_from_item(
            raw, broad, source_report, slide_id, len(candidates), QA_TEMPLATE_HASH
        )
        if isinstance(result, str):
            drops.append(DropReason(index, result, span[:200]))
        else:
            candidates.append(result)
    return candidates, drops


# -- text-only ensemble filter ------------------------------------------------------

FILTER_PROMPT_TEMPLATE = (
    "{question}\n{options}\nAnswer with the letter of the correct option."
)

FILTER_TEMPLATE_HASH = template_hash(FILTER_PROMPT_TEMPLATE)


def filter_prompt(record: QARecord) -> str:
    lines = "\n".join(
        f"{letter}. {text}"
        for letter, text in zip(option_letters(len(record.options)), record.options)
    )
    return FILTER_PROMPT_TEMPLATE.format(question=record.question, options=lines)


def ensemble_filter(
    qa: QACandidate,
    clients: Sequence[ChatClient],
    cache: PromptCache | None = None,
) -> FilterVerdict:
    """Ask 4 models the question without any slide; keep iff < 3 are right.

    A question three text-only models can answer needs no image, so it
    measures nothing about the slide. Client failures count as incorrect
    and are flagged.
    """
    if len(clients) != 4:
        raise UsageError("ensemble filter needs exactly 4 clients")
    if qa.record.qtype != "multi-choice":
        raise UsageError("ensemble filter applies to multi-choice candidates")
    prompt = filter_prompt(qa.record)
    correct = []
    failed = []
    for client in clients:
        try:
            reply = _call(client, cache, FILTER_TEMPLATE_HASH, prompt, prompt)
        except ClientError:
            correct.append(False)
            failed.append(True)
            continue
        failed.append(False)
        correct.append(extract_choice(reply, qa.record.options) == qa.record.answer)
    n_right = sum(correct)
    return FilterVerdict(
        correct=tuple(correct),
        failed=tuple(failed),
        kept=n_right < 3,
        reason=f"{n_right}/4 text-only models answered correctly",
    )


# -- train/test split ---------------------------------------------------------------


@dataclass
class SplitResult:
    train: set[str]
    test: set[str]


def split_assign(reports: Sequence[ReportRecord], seed: int = 0) -> SplitResult:
    """Slides of multi-slide reports all train; single-slide reports split 80/20.

    The 20% test count rounds half up. A slide linked to two reports is a
    usage error because it would leak across the boundary.
    """
    seen: dict[str, str] = {}
    for report in reports:
        for slide in report.slide_ids:
            if slide in seen:
                raise UsageError(
                    f"slide {slide!r} linked to reports {seen[slide]!r} and {report.patient_id!r}"
                )
            seen[slide] = report.patient_id
    train: set[str] = set()
    singles: list[str] = []
    for report in reports:
        if len(report.slide_ids) > 1:
            train.update(report.slide_ids)
        else:
            singles.extend(report.slide_ids)
    singles.sort()
    rng = stream(seed, "split")
    order = rng.permutation(len(singles))
    n_test = (len(singles) + 2) // 5
    test = {singles[int(i)] for i in order[:n_test]}
    train.update(singles[int(i)] for i in order[n_test:])
    return SplitResult(train=train, test=test)


# -- label-to-VQA transformation ----------------------------------------------------

# Task -> option list, in the documented fixed order; answers letter from it.
BCNB_TASKS: dict[str, tuple[str, ...]] = {
    "ER Status": ("Positive", "Negative"),
    "PR Status": ("Positive", "Negative"),
    "HER2 Status": ("Positive", "Negative"),
    "HER2 Expression": ("0", "1+", "2+", "3+"),
    "Histological Grading": ("1", "2", "3"),
    "Molecular Subtype": ("Luminal A", "Luminal B", "HER2(+)", "Triple negative"),
    "Tumor Type": ("Invasive ductal carcinoma", "Invasive lobular carcinoma", "Other Type"),
}

BCNB_TASK_CATEGORIES: dict[str, tuple[str, str]] = {
    "ER Status": ("Clinical", "Biomarker Analysis"),
    "PR Status": ("Clinical", "Biomarker Analysis"),
    "HER2 Status": ("Clinical", "Biomarker Analysis"),
    "HER2 Expression": ("Clinical", "Biomarker Analysis"),
    "Histological Grading": ("Diagnosis", "Grading"),
    "Molecular Subtype": ("Diagnosis", "Disease Classification"),
    "Tumor Type": ("Diagnosis", "Disease Classification"),
}


def labels_to_vqa(
    task: str,
    labels: Sequence[str],
    slide_label: str,
    slide_id: str = "",
    record_id: str | None = None,
    broad: str | None = None,
    narrow: str | None = None,
) -> QARecord:
    """Turn a classification label into a lettered multi-choice record.

    Options keep the given order so answer letters are reproducible run to
    run. Categories come from the built-in task table unless given.
    """
    labels = list(labels)
    if len(set(labels)) != len(labels):
        raise UsageError("duplicate labels")
    letters = option_letters(len(labels))
    if slide_label not in labels:
        raise UsageError(f"label {slide_label!r} not in label set")
    if broad is None or narrow is None:
        if task not in BCNB_TASK_CATEGORIES:
            raise UsageError(f"unknown task {task!r}: pass broad and narrow explicitly")
        broad, narrow = BCNB_TASK_CATEGORIES[task]
    return QARecord(
        id=record_id if record_id is not None else f"{slide_id}:{task}",
        slide_id=slide_id,
        question=label_question(task),
        options=labels,
        answer=letters[labels.index(slide_label)],
        qtype="multi-choice",
        broad=broad,
        narrow=narrow,
    )


# -- batch driver -------------------------------------------------------------------


@dataclass
class CurationResult:
    """Everything one pipeline pass produced, ordered by patient id."""

    cleaned: dict[str, str] = field(default_factory=dict)
    captions: dict[str, str] = field(default_factory=dict)
    candidates: list[QACandidate] = field(default_factory=list)
    drops: list[DropReason] = field(default_factory=list)
    verdicts: dict[str, FilterVerdict] = field(default_factory=dict)
    kept: list[QACandidate] = field(default_factory=list)
    flagged: dict[str, str] = field(default_factory=dict)


def run_curation(
    reports: Sequence[ReportRecord],
    client: ChatClient,
    cache: PromptCache | None = None,
    filter_clients: Sequence[ChatClient] | None = None,
    broads: Sequence[str] = tuple(NARROW_BY_BROAD),
    jobs: int = 4,
) -> CurationResult:
    """Run clean -> caption -> QA (-> filter) over a batch of reports.

    A report whose chat calls die lands in `flagged` and the batch moves
    on. Short-answer candidates bypass the text-only filter.
    """
    ids = [r.patient_id for r in reports]
    if len(set(ids)) != len(ids):
        raise UsageError("duplicate patient ids")
    ordered = sorted(reports, key=lambda r: r.patient_id)

    def one(report: ReportRecord):
        try:
            cleaned = clean_report(report, client, cache)
            caption = gen_caption(cleaned, client, cache)
            cands: list[QACandidate] = []
            drops: list[DropReason] = []
            for broad in broads:
                got, dropped = gen_qas(
                    cleaned,
                    broad,
                    client,
                    cache,
                    source_report=report.patient_id,
                    slide_id=report.slide_ids[0],
                )
                cands.extend(got)
                drops.extend(dropped)
            return report.patient_id, cleaned, caption, cands, drops, None
        except ClientError as exc:
            return report.patient_id, None, None, [], [], str(exc)

    result = CurationResult()
    if jobs > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one, ordered))
    else:
        outcomes = [one(r) for r in ordered]
    for patient_id, cleaned, caption, cands, drops, error in outcomes:
        if error is not None:
            result.flagged[patient_id] = error
            continue
        result.cleaned[patient_id] = cleaned
        result.captions[patient_id] = caption
        result.candidates.extend(cands)
        result.drops.extend(drops)
    if filter_clients is not None:
        for cand in result.candidates:
            if cand.record.qtype != "multi-choice":
                result.kept.append(cand)
                continue
            verdict = ensemble_filter(cand, filter_clients, cache)
            result.verdicts[cand.record.id] = verdict
            if verdict.kept:
                result.kept.append(cand)
    else:
        result.kept = list(result.candidates)
    return result


def save_candidates(path, candidates: Sequence[QACandidate]) -> None:
    """Line-delimited candidates: record fields plus provenance."""
    with open(path, "w", encoding="utf-8") as fh:
        for cand in candidates:
            row = dict(cand.record.__dict__)
            row["reasoning"] = cand.reasoning
            row["source_report"] = cand.source_report
            row["prompt_hash"] = cand.prompt_hash
            fh.write(json.dumps(row, sort_keys=True) + "\n")
