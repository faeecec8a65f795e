"""Tokenisation, task containers, synthetic suites and JSON-lines ingestion."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)

Example = tuple[list[int], int]


def stable_hash64(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def tokenize_hash(text: str, vocab_size: int, max_text_len: int | None = None) -> list[int]:
    """Lowercased word pieces hashed into ``1..vocab_size-1`` (0 is CLS)."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be at least 2")
    ids = [1 + stable_hash64(w) % (vocab_size - 1) for w in _TOKEN_RE.findall(text.lower())]
    return ids if max_text_len is None else ids[:max_text_len]


@dataclass
class TaskSpec:
    task_id: str
    name: str
    labels: list[str]
    train: list[Example] = field(default_factory=list)
    val: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)
    provenance: str = "synthetic"
    texts: dict[str, list[str]] | None = field(default=None, repr=False, compare=False)

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def validate(self) -> None:
        for split in ("train", "val", "test"):
            for i, (_, y) in enumerate(getattr(self, split)):
                if not 0 <= y < len(self.labels):
                    raise ValueError(f"{self.task_id}/{split}[{i}]: label index {y} outside label set")


@dataclass
class TaskSequence:
    order_id: str
    tasks: list[TaskSpec]

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        dupes = sorted({t for t in ids if ids.count(t) > 1})
        if dupes:
            raise ValueError(f"duplicate task ids in sequence: {dupes}")

    def reorder(self, task_ids, order_id: str) -> "TaskSequence":
        by_id = {t.task_id: t for t in self.tasks}
        return TaskSequence(order_id, [by_id[t] for t in task_ids])


# -- synthetic suites -------------------------------------------------------

_LETTERS = np.array(list("abcdefghijklmnopqrstuvwxyz"))


def _pseudo_words(rng, n, used_words, used_ids, vocab_size, length=6):
    """``n`` fresh lowercase words whose hashed ids collide with nothing in ``used_ids``."""
    if len(used_ids) + n > vocab_size - 1:
        raise ValueError(f"vocab_size={vocab_size} cannot hold {len(used_ids) + n} distinct synthetic words")
    words = []
    while len(words) < n:
        w = "".join(rng.choice(_LETTERS, size=length))
        if w in used_words:
            continue
        tid = tokenize_hash(w, vocab_size)[0]
        if tid in used_ids:
            continue
        used_words.add(w)
        used_ids.add(tid)
        words.append(w)
    return words


@dataclass
class SuiteLayout:
    """Word inventories behind a synthetic suite (kept for oracles and audits)."""

    filler: list[str]
    signals: list[list[list[str]]]  # task -> class -> words
    distractors: list[list[list[str]]]  # task -> list of earlier-task class patterns


def gen_synthetic_suite(
    n_tasks: int = 5,
    classes_per_task: int = 2,
    samples_per_class: int = 200,
    seed: int = 0,
    conflict: bool = False,
    shared_vocab: bool = False,
    vocab_size: int = 4096,
    text_len: int = 16,
    signal_words: int = 4,
    signal_hits: int = 2,
    distractor_hits: int | None = None,
    n_patterns: int | None = None,
    n_filler: int = 600,
    test_per_class: int = 50,
    val_per_class: int = 10,
    order_id: str | None = None,
) -> tuple[TaskSequence, SuiteLayout]:
    """Keyword-signal classification tasks embedded in random filler text.

    Each class owns ``signal_words`` words; a text of that class carries
    ``signal_hits`` of them at random positions among filler words.

    ``conflict``: every text of task k>1 additionally carries the patterns of
    earlier tasks, assigned through a fresh random class permutation per
    example, so those words are uninformative for task k while remaining the
    signal for the task they came from.

    ``distractor_hits`` (default ``signal_hits``) is the number of words
    drawn from each earlier pattern.

    ``shared_vocab``: every task picks its class patterns from one common pool
    of ``n_patterns`` (default ``2 * classes_per_task``) patterns, so a pattern
    looks the same wherever it recurs while the pairing differs per task.
    """
    if n_tasks < 2:
        raise ValueError("n_tasks must be at least 2")
    rng = np.random.default_rng(seed)
    used_words: set[str] = set()
    used_ids: set[int] = set()
    filler = _pseudo_words(rng, n_filler, used_words, used_ids, vocab_size)

    signals: list[list[list[str]]] = []
    if shared_vocab:
        pool = [_pseudo_words(rng, signal_words, used_words, used_ids, vocab_size)
                for _ in range(n_patterns or 2 * classes_per_task)]
        for _ in range(n_tasks):
            pick = rng.choice(len(pool), size=classes_per_task, replace=False)
            signals.append([pool[i] for i in pick])
    else:
        for _ in range(n_tasks):
            signals.append([_pseudo_words(rng, signal_words, used_words, used_ids, vocab_size)
                            for _ in range(classes_per_task)])

    d_hits = signal_hits if distractor_hits is None else distractor_hits
    distractors = [[] for _ in range(n_tasks)]
    if conflict:
        for k in range(1, n_tasks):
            distractors[k] = [signals[j] for j in range(k)]

    n_train = samples_per_class + val_per_class
    n_total = n_train + test_per_class
    tasks = []
    for k in range(n_tasks):
        labels = [f"c{c}" for c in range(classes_per_task)]
        texts: dict[str, list[tuple[str, int]]] = {"train": [], "test": []}
        rows = []
        for c in range(classes_per_task):
            for _ in range(n_total):
                rows.append((_compose(rng, filler, signals[k][c], distractors[k], classes_per_task,
                                      text_len, signal_hits, d_hits), c))
        order = rng.permutation(len(rows))
        rows = [rows[i] for i in order]
        per_class_seen = [0] * classes_per_task
        for text, c in rows:
            split = "train" if per_class_seen[c] < n_train else "test"
            per_class_seen[c] += 1
            texts[split].append((text, c))
        spec = TaskSpec(
            task_id=f"t{k + 1}", name=f"synthetic-{k + 1}", labels=labels,
            train=[(tokenize_hash(t, vocab_size), c) for t, c in texts["train"]],
            test=[(tokenize_hash(t, vocab_size), c) for t, c in texts["test"]],
            provenance="synthetic",
            texts={s: [t for t, _ in v] for s, v in texts.items()},
        )
        if val_per_class:
            spec = split_validation(spec, val_per_class, seed=seed + 7919 * (k + 1))
        tasks.append(spec)
    oid = order_id or ("conflict" if conflict else "transfer" if shared_vocab else "disjoint") + f"{n_tasks}"
    return TaskSequence(oid, tasks), SuiteLayout(filler, signals, distractors)


def _compose(rng, filler, pattern, distractor_sets, n_classes, text_len, hits, d_hits):
    words = list(rng.choice(filler, size=text_len))
    inserts = [str(w) for w in rng.choice(pattern, size=hits, replace=True)]
    for earlier in distractor_sets:
        perm = rng.permutation(n_classes)
        inserts += [str(w) for w in rng.choice(earlier[perm[0]], size=d_hits, replace=True)]
    slots = rng.choice(text_len, size=min(len(inserts), text_len), replace=False)
    for s, w in zip(slots, inserts):
        words[s] = w
    return " ".join(words)


SUITES = {
    "conflict5": dict(n_tasks=5, conflict=True),
    "disjoint5": dict(n_tasks=5, conflict=False),
    "transfer5": dict(n_tasks=5, conflict=False, shared_vocab=True, samples_per_class=50),
    "toy2": dict(n_tasks=2, conflict=True, samples_per_class=20, test_per_class=10, val_per_class=4),
}


def make_suite(name: str, seed: int, **overrides) -> tuple[TaskSequence, SuiteLayout]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}")
    kwargs = {**SUITES[name], **overrides}
    return gen_synthetic_suite(seed=seed, order_id=name, **kwargs)


def frequency_oracle(spec: TaskSpec, class_words: list[list[str]], vocab_size: int, split="test") -> float:
    """Accuracy of counting each class's signal ids and picking the largest count."""
    class_ids = [{tokenize_hash(w, vocab_size)[0] for w in ws} for ws in class_words]
    rows = getattr(spec, split)
    if not rows:
        return float("nan")
    correct = 0
    for ids, y in rows:
        counts = [sum(1 for i in ids if i in cid) for cid in class_ids]
        correct += int(np.argmax(counts) == y)
    return correct / len(rows)


def warmup_corpus(layout: SuiteLayout, n_docs: int, seed: int, vocab_size: int,
                  text_len: int = 16) -> list[list[int]]:
    """Unlabelled topical documents over the suite's word inventory.

    Each document mixes filler with words from one randomly chosen word
    cluster (any class pattern of any task), giving masked-token prediction
    co-occurrence structure to learn from.
    """
    rng = np.random.default_rng(seed)
    clusters = [ws for task in layout.signals for ws in task]
    docs = []
    for _ in range(n_docs):
        words = list(rng.choice(layout.filler, size=text_len))
        cluster = clusters[rng.integers(len(clusters))]
        n_topic = int(rng.integers(2, 5))
        for s in rng.choice(text_len, size=n_topic, replace=False):
            words[s] = str(rng.choice(cluster))
        docs.append(tokenize_hash(" ".join(words), vocab_size))
    return docs


# -- splits -----------------------------------------------------------------

def split_validation(spec: TaskSpec, per_class: int, seed: int = 0) -> TaskSpec:
    """Move ``per_class`` seeded train samples of every class into ``val``.

    The count per class is ``min(per_class, 10% of that class)`` at desk scale.
    """
    if per_class <= 0:
        return TaskSpec(spec.task_id, spec.name, list(spec.labels), list(spec.train), list(spec.val),
                        list(spec.test), spec.provenance, spec.texts)
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {c: [] for c in range(len(spec.labels))}
    for i, (_, y) in enumerate(spec.train):
        by_class[y].append(i)
    take: set[int] = set()
    for c, idxs in by_class.items():
        n = min(per_class, max(1, len(idxs) // 10))
        if len(idxs) - n < 1:
            raise ValueError(f"class {spec.labels[c]!r} of task {spec.task_id} is too small to withhold {n}")
        take.update(int(i) for i in rng.choice(idxs, size=n, replace=False))
    train = [ex for i, ex in enumerate(spec.train) if i not in take]
    val = list(spec.val) + [spec.train[i] for i in sorted(take)]
    texts = spec.texts
    if texts is not None and len(texts.get("train", [])) == len(spec.train):
        # keep raw texts aligned with the examples they belong to
        texts = dict(texts)
        old_train = texts["train"]
        texts["train"] = [t for i, t in enumerate(old_train) if i not in take]
        texts["val"] = list(texts.get("val", [])) + [old_train[i] for i in sorted(take)]
    return TaskSpec(spec.task_id, spec.name, list(spec.labels), train, val, list(spec.test),
                    spec.provenance, texts)


# -- JSON lines -------------------------------------------------------------

def load_jsonl_task(path, task_id: str, label_field: str = "label", text_field: str = "text",
                    vocab_size: int = 4096, max_text_len: int | None = None,
                    split_files: dict[str, str] | None = None, labels: list[str] | None = None) -> TaskSpec:
    """Parse one task from JSON lines; labels are indexed by first appearance
    unless an explicit ``labels`` order is given (then unknown labels are errors).

    Records may carry ``"split"`` (train/val/test; default train).  With
    ``split_files`` each split is read from its own file instead.
    """
    sources = split_files or {None: path}
    fixed = labels is not None
    labels = list(labels) if fixed else []
    splits: dict[str, list[Example]] = {"train": [], "val": [], "test": []}
    texts: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    pending_test: list[tuple[int, str, list[int], str]] = []
    for forced, src in sources.items():
        with open(src, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    text, label = rec[text_field], str(rec[label_field])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(f"{src}:{lineno}: malformed record ({exc})") from exc
                split = forced or rec.get("split", "train")
                if split not in splits:
                    raise ValueError(f"{src}:{lineno}: unknown split {split!r}")
                ids = tokenize_hash(text, vocab_size, max_text_len)
                if split == "test":
                    pending_test.append((lineno, label, ids, text))
                    continue
                if label not in labels:
                    if fixed:
                        raise ValueError(f"{src}:{lineno}: label {label!r} not in declared labels {labels}")
                    labels.append(label)
                splits[split].append((ids, labels.index(label)))
                texts[split].append(text)
    for lineno, label, ids, text in pending_test:
        if label not in labels:
            if fixed or splits["train"] or splits["val"]:
                raise ValueError(f"{path}:{lineno}: test label {label!r} never seen in train/val")
            labels.append(label)
        splits["test"].append((ids, labels.index(label)))
        texts["test"].append(text)
    spec = TaskSpec(task_id, Path(path).stem, labels, splits["train"], splits["val"], splits["test"], "file",
                    texts)
    spec.validate()
    return spec


def export_jsonl(spec: TaskSpec, path) -> None:
    """Write a task as JSON lines.  Text is the original text when known,
    otherwise ``tok<ID>`` placeholders (which do not re-hash to the same ids)."""
    with open(path, "w", encoding="utf-8") as fh:
        for split in ("train", "val", "test"):
            texts = (spec.texts or {}).get(split)
            for i, (ids, y) in enumerate(getattr(spec, split)):
                text = texts[i] if texts is not None and i < len(texts) else " ".join(f"tok{t}" for t in ids)
                fh.write(json.dumps({"text": text, "label": spec.labels[y], "split": split}) + "\n")


def write_task_jsonl(spec: TaskSpec, path) -> None:
    """Lossless variant of :func:`export_jsonl` that also stores raw ``token_ids``."""
    with open(path, "w", encoding="utf-8") as fh:
        for split in ("train", "val", "test"):
            for ids, y in getattr(spec, split):
                fh.write(json.dumps({"token_ids": list(map(int, ids)), "label": spec.labels[y],
                                     "split": split}) + "\n")


def read_task_jsonl(path, task_id: str, labels: list[str] | None = None) -> TaskSpec:
    """Read files written by :func:`write_task_jsonl`; labels by first appearance unless given."""
    labels = list(labels) if labels is not None else []
    splits: dict[str, list[Example]] = {"train": [], "val": [], "test": []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids = [int(t) for t in rec["token_ids"]]
                label = str(rec["label"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if label not in labels:
                labels.append(label)
            splits[rec.get("split", "train")].append((ids, labels.index(label)))
    return TaskSpec(task_id, Path(path).stem, labels, splits["train"], splits["val"], splits["test"], "file")


def write_manifest(seq: TaskSequence, paths: list[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"order_id": seq.order_id,
                   "tasks": [{"task_id": t.task_id, "path": p, "labels": list(t.labels)}
                             for t, p in zip(seq.tasks, paths)]},
                  fh, indent=2)


def load_manifest(path, vocab_size: int = 4096, max_text_len: int | None = None,
                  val_per_class: int = 0, seed: int = 0) -> TaskSequence:
    """Sequence manifest: ``{"order_id": ..., "tasks": [{"task_id", "path", "labels"?}, ...]}``."""
    base = Path(path).parent
    with open(path, encoding="utf-8") as fh:
        man = json.load(fh)
    tasks = []
    for i, entry in enumerate(man["tasks"]):
        p = Path(entry["path"])
        p = p if p.is_absolute() else base / p
        with open(p, encoding="utf-8") as fh:
            first = fh.readline()
        if first and "token_ids" in json.loads(first):
            spec = read_task_jsonl(p, entry["task_id"], labels=entry.get("labels"))
        else:
            spec = load_jsonl_task(p, entry["task_id"], vocab_size=vocab_size, max_text_len=max_text_len,
                                   labels=entry.get("labels"))
        if val_per_class and not spec.val:
            spec = split_validation(spec, val_per_class, seed=seed + i)
        tasks.append(spec)
    return TaskSequence(str(man.get("order_id", Path(path).stem)), tasks)
