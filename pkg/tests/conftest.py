import random
from datetime import datetime, timezone

import pytest

from fbl.corpus import Document, Granularity
from fbl.diffs import Changeset, DiffLine, FileDiff, Hunk, LineKind
from fbl.encode import Vocabulary


def ts(day: int) -> datetime:
    return datetime(2020, 1, day, tzinfo=timezone.utc)


def make_hunk(lines, old_start=1, new_start=1) -> Hunk:
    """lines: sequence of (kind_char, text) with kind_char in '+- '."""
    kinds = {"+": LineKind.ADDED, "-": LineKind.REMOVED, " ": LineKind.CONTEXT}
    return Hunk(
        old_start=old_start,
        new_start=new_start,
        lines=tuple(DiffLine(kinds[k], t) for k, t in lines),
    )


def make_changeset(cs_id, file_hunks, log="", day=1) -> Changeset:
    """file_hunks: list of (path, [hunk, ...])."""
    return Changeset(
        changeset_id=cs_id,
        log_message=log,
        files=tuple(FileDiff(path=p, hunks=tuple(hs)) for p, hs in file_hunks),
        committed_at=ts(day),
    )


def hunk_doc(cs_id, hunk, file_idx=0, hunk_idx=0) -> Document:
    return Document(
        doc_id=f"{cs_id}:{file_idx}:{hunk_idx}",
        origin_changeset=cs_id,
        granularity=Granularity.HUNK,
        payload=hunk,
    )


def random_hunk(rng: random.Random, words=("alpha", "beta", "gamma", "delta")) -> Hunk:
    """A random hunk with at least one modified line."""
    n = rng.randint(1, 8)
    lines = []
    has_mod = False
    for _ in range(n):
        k = rng.choice("+- ")
        has_mod = has_mod or k in "+-"
        text = " ".join(rng.choice(words) for _ in range(rng.randint(0, 3)))
        lines.append((k, text))
    if not has_mod:
        lines.append(("+", rng.choice(words)))
    return make_hunk(lines)


@pytest.fixture
def tiny_vocab() -> Vocabulary:
    return Vocabulary.from_tokens(
        ["a", "b", "c", "d", "crash", "on", "save", "manager", "##servlet",
         "alpha", "beta", "gamma", "delta", "int", "x", "y", "=", "0", "1", ";"]
    )


# the four-line hunk used by the encoding golden tests:
#   context "a", added "b", added "c", removed "d"
@pytest.fixture
def golden_hunk() -> Hunk:
    return make_hunk([(" ", "a"), ("+", "b"), ("+", "c"), ("-", "d")])
