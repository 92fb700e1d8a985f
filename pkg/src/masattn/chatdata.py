"""Byte-level vocabulary, chat rendering with segment ids, synthetic datasets."""

from __future__ import annotations

import json
import random
import string
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

from .errors import ValidationError
from .masking import SENTINEL, SegmentedTokens

VOCAB_VERSION = "masattn-bytes-v1"
BOS = 256
EOS = 257
SYS_BEGIN = 258
USER_BEGIN = 259
ASST_BEGIN = 260
VOCAB_SIZE = 261
SPECIAL_NAMES = {BOS: "<bos>", EOS: "<eos>", SYS_BEGIN: "<sys>", USER_BEGIN: "<user>", ASST_BEGIN: "<asst>"}

DEFAULT_SYSTEM = "Answer with one letter."


def tokenize(text: str | bytes) -> list[int]:
    raw = text if isinstance(text, bytes) else text.encode("utf-8")
    return list(raw)


def detokenize(ids: Iterable[int], errors: str = "strict") -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors=errors)


def render_token(i: int) -> str:
    return SPECIAL_NAMES.get(i, chr(i) if 32 <= i < 127 else f"\\x{i:02x}")


@dataclass(frozen=True)
class ChatExample:
    user: str
    assistant: str = ""
    system: str = DEFAULT_SYSTEM
    choices: tuple[str, ...] | None = None
    task: str = "default"

    def __post_init__(self):
        if not self.user:
            raise ValidationError("user prompt must be nonempty")
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple(self.choices))

    def to_json(self) -> str:
        d = asdict(self)
        d["answer"] = d.pop("assistant")
        if d["choices"] is not None:
            d["choices"] = list(d["choices"])
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ChatExample":
        return cls(
            user=d["user"],
            assistant=d.get("answer", d.get("assistant", "")),
            system=d.get("system", ""),
            choices=d.get("choices"),
            task=d.get("task", "default"),
        )


def render_chat(ex: ChatExample, include_assistant: bool = True) -> SegmentedTokens:
    """``[BOS, SYS_BEGIN, system]`` is segment 0, ``[USER_BEGIN, user]`` segment 1,
    and (for training) ``[ASST_BEGIN, answer, EOS]`` are generated-phase tokens."""
    sys_toks = [BOS, SYS_BEGIN] + tokenize(ex.system)
    user_toks = [USER_BEGIN] + tokenize(ex.user)
    toks = sys_toks + user_toks
    segs = [0] * len(sys_toks) + [1] * len(user_toks)
    roles = ["system"] * len(sys_toks) + ["user"] * len(user_toks)
    if include_assistant:
        if not ex.assistant:
            raise ValidationError("training example has an empty answer")
        asst = [ASST_BEGIN] + tokenize(ex.assistant) + [EOS]
        toks += asst
        segs += [SENTINEL] * len(asst)
        roles += ["assistant"] * len(asst)
    return SegmentedTokens(tuple(toks), tuple(segs), tuple(roles))


def render_prompt(ex: ChatExample) -> SegmentedTokens:
    """Prompt followed by the assistant header, ready for next-token scoring."""
    return render_chat(ex, include_assistant=False) + SegmentedTokens((ASST_BEGIN,), (SENTINEL,), ("assistant",))


def render_system(system: str) -> SegmentedTokens:
    toks = [BOS, SYS_BEGIN] + tokenize(system)
    return SegmentedTokens(tuple(toks), (0,) * len(toks), ("system",) * len(toks))


def render_user(user: str, segment_id: int = 1) -> SegmentedTokens:
    toks = [USER_BEGIN] + tokenize(user)
    return SegmentedTokens(tuple(toks), (segment_id,) * len(toks), ("user",) * len(toks))


def truncate(seg: SegmentedTokens, cutoff_len: int) -> SegmentedTokens | None:
    """Cut to ``cutoff_len`` tokens; ``None`` if the cut would drop the whole answer.

    Every token is atomic (specials are single ids), so a cut never splits one.
    """
    if len(seg) <= cutoff_len:
        return seg
    cut = seg.slice(0, cutoff_len)
    # the assistant header alone carries no answer
    if sum(1 for r in cut.roles if r == "assistant") < 2:
        return None
    return cut


KEY_POOL = string.ascii_lowercase
VALUE_POOL = string.ascii_uppercase


def _pools(n_facts: int, pool: int) -> tuple[str, str]:
    if not 2 <= n_facts <= pool <= 26:
        raise ValidationError(f"need 2 <= n_facts <= pool <= 26 (got n_facts={n_facts}, pool={pool})")
    return KEY_POOL[:pool], VALUE_POOL[:pool]


def _facts(rng: random.Random, n_facts: int, pool: int) -> tuple[list[str], list[str], str]:
    keys_pool, values_pool = _pools(n_facts, pool)
    keys = rng.sample(keys_pool, n_facts)
    values = rng.sample(values_pool, n_facts)
    return keys, values, " ".join(k + v for k, v in zip(keys, values))


def gen_retrieval_task(n: int, n_facts: int = 6, n_choices: int = 4, seed: int = 0, split: str = "train",
                       system: str = DEFAULT_SYSTEM, pool: int = 8) -> list[ChatExample]:
    """Key/value lookup posed as multiple choice.

    The user prompt reads ``facts | choices | key?``: ``n_facts`` facts ``kV``
    (lowercase keys, uppercase values, both drawn from the first ``pool`` letters),
    then ``n_choices`` candidate values, then the question. Distractors are values
    of other facts, so only the lookup separates them. The answer is the value
    letter itself, one token.
    """
    if n_choices < 2 or n_choices > n_facts:
        raise ValidationError(f"need 2 <= n_choices <= n_facts (got {n_choices} choices, {n_facts} facts)")
    _pools(n_facts, pool)
    rng = random.Random(f"retrieval:{seed}:{split}")
    out = []
    for _ in range(n):
        keys, values, facts = _facts(rng, n_facts, pool)
        target = rng.randrange(n_facts)
        others = [values[i] for i in range(n_facts) if i != target]
        options = rng.sample(others, n_choices - 1) + [values[target]]
        rng.shuffle(options)
        out.append(ChatExample(user=f"{facts} | {' '.join(options)} | {keys[target]}?", assistant=values[target],
                               system=system, choices=tuple(options), task="retrieval"))
    return out


def write_jsonl(path: str | Path, examples: Iterable[ChatExample]) -> int:
    count = 0
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> list[ChatExample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(ChatExample.from_dict(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad example ({exc})") from exc
    return out


def gen_recall_task(n: int, n_facts: int = 6, seed: int = 0, split: str = "pretrain",
                    system: str = DEFAULT_SYSTEM, pool: int = 8, n_queries: int = 12) -> list[ChatExample]:
    """Free-form recall: ``facts | kV kV ... | key?`` answered by the value.

    The middle part repeats randomly chosen facts, so under a full-sequence loss
    every repeated value is a lookup target; this is the base-model corpus.
    """
    if n_queries < 0:
        raise ValidationError("n_queries must be >= 0")
    _pools(n_facts, pool)
    rng = random.Random(f"recall:{seed}:{split}")
    out = []
    for _ in range(n):
        keys, values, facts = _facts(rng, n_facts, pool)
        drill = " ".join(keys[i] + values[i] for i in (rng.randrange(n_facts) for _ in range(n_queries)))
        target = rng.randrange(n_facts)
        out.append(ChatExample(user=f"{facts} | {drill} | {keys[target]}?", assistant=values[target],
                               system=system, task="recall"))
    return out


def gen_base_corpus(n: int, seed: int = 0, min_facts: int = 2, max_facts: int = 6, pool: int = 8,
                    n_queries: int = 12) -> list[ChatExample]:
    """Recall examples with fact counts cycling through ``min_facts..max_facts``.

    Short tables are solved early and give the lookup circuit a foothold that
    then carries over to the long ones; a corpus of only 6-fact tables tends to
    stall for thousands of steps.
    """
    if min_facts > max_facts:
        raise ValidationError("min_facts > max_facts")
    sizes = list(range(min_facts, max_facts + 1))
    per = [gen_recall_task(n // len(sizes) + 1, nf, seed, split=f"base{nf}", pool=pool, n_queries=n_queries)
           for nf in sizes]
    out = [per[i % len(sizes)][i // len(sizes)] for i in range(n)]
    random.Random(f"base:{seed}").shuffle(out)
    return out
