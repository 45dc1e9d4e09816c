"""Dialog corpus ingestion, tokenization, pair construction, and the
synthetic grammar task used as an exact-oracle testbed.

File formats:
    eou-lines  one dialog per line, utterances joined by " EOU "
               (the DailyDialog-style "__eou__" separator is also accepted,
               including a trailing one)
    jsonl      one JSON object per line: {"dialog": ["utt", ...]}
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, EOU, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<eou>", "<unk>"]

_TOKEN_RE = re.compile(r"[\w']+|[^\w\s]")
_EOU_SPLIT_RE = re.compile(r"\s*(?:__eou__|\bEOU\b)\s*")


def surface_split(text: str) -> list[str]:
    """Lowercased word/punctuation split used everywhere text meets tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(surface_split(text))


@dataclass
class Utterance:
    token_ids: list[int]

    def __post_init__(self):
        if not self.token_ids:
            raise ValueError("empty utterance")

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class DialogContext:
    """Prior turns plus their flattened form with <eou> separators between turns."""

    utterances: list[Utterance]
    flat: list[int]

    @classmethod
    def build(cls, utterances: list[Utterance], max_context_len: int = 0) -> "DialogContext":
        """Flatten; when too long, drop whole oldest turns first, then oldest
        tokens of the single remaining turn."""
        utts = list(utterances)
        if not utts:
            raise ValueError("context needs at least one utterance")

        def flatten(us: list[Utterance]) -> list[int]:
            flat: list[int] = []
            for i, u in enumerate(us):
                if i:
                    flat.append(EOU)
                flat.extend(u.token_ids)
            return flat

        flat = flatten(utts)
        if max_context_len > 0:
            while len(flat) > max_context_len and len(utts) > 1:
                utts = utts[1:]
                flat = flatten(utts)
            if len(flat) > max_context_len:
                flat = flat[-max_context_len:]
        return cls(utts, flat)

    @property
    def length(self) -> int:
        return len(self.flat)


@dataclass
class TrainingPair:
    context: DialogContext
    response: Utterance


class UtterancePool:
    """All training-set utterances, for uniform negative sampling."""

    def __init__(self, utterances: list[Utterance]):
        if not utterances:
            raise ValueError("empty utterance pool")
        self.utterances = list(utterances)

    def __len__(self) -> int:
        return len(self.utterances)

    def sample(self, rng: np.random.Generator) -> Utterance:
        return self.utterances[int(rng.integers(len(self.utterances)))]


def sample_negative(pool: UtterancePool, rng: np.random.Generator) -> Utterance:
    return pool.sample(rng)


class Tokenizer:
    """Frequency word-level tokenizer with fixed special ids."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("token list must start with the special tokens")
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(tok, UNK) for tok in surface_split(text)]

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS, EOS, EOU):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_tokenizer(dialogs: list[list[str]], vocab_size: int) -> Tokenizer:
    """Vocabulary = specials + most frequent surface tokens, ties lexicographic."""
    if vocab_size < len(SPECIAL_TOKENS):
        raise ValueError(f"vocab_size must be at least {len(SPECIAL_TOKENS)}")
    counts: dict[str, int] = {}
    for dialog in dialogs:
        for utt in dialog:
            for tok in surface_split(utt):
                counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: vocab_size - len(SPECIAL_TOKENS)]]
    return Tokenizer(SPECIAL_TOKENS + keep)


def load_corpus(path, fmt: str) -> list[list[str]]:
    """Read dialogs as lists of utterance strings. Empty lines are skipped;
    malformed lines raise with their line number."""
    path = Path(path)
    if fmt not in ("eou-lines", "jsonl"):
        raise ValueError(f"unknown corpus format: {fmt}")
    dialogs: list[list[str]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if fmt == "eou-lines":
                utts = [u for u in _EOU_SPLIT_RE.split(line) if u]
                if not utts:
                    raise ValueError(f"{path}:{lineno}: no utterances on non-empty line")
            else:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
                utts = obj.get("dialog") if isinstance(obj, dict) else None
                if not isinstance(utts, list) or not all(isinstance(u, str) for u in utts) or not utts:
                    raise ValueError(f"{path}:{lineno}: expected {{\"dialog\": [\"utt\", ...]}}")
            dialogs.append(utts)
    return dialogs


def save_corpus(path, dialogs: list[list[str]]) -> None:
    """Write eou-lines format."""
    lines = [" EOU ".join(d) for d in dialogs]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def make_pairs(
    dialogs: list[list[str]],
    tokenizer: Tokenizer,
    max_context_turns: int = 4,
    max_context_len: int = 0,
) -> list[TrainingPair]:
    """One pair per turn t >= 2: the windowed preceding turns vs that turn.

    Utterances that tokenize to nothing are dropped before pairing.
    """
    if max_context_turns < 1:
        raise ValueError("max_context_turns must be >= 1")
    pairs: list[TrainingPair] = []
    for dialog in dialogs:
        encoded = [ids for ids in (tokenizer.encode(u) for u in dialog) if ids]
        turns = [Utterance(ids) for ids in encoded]
        for t in range(1, len(turns)):
            window = turns[max(0, t - max_context_turns) : t]
            context = DialogContext.build(window, max_context_len=max_context_len)
            pairs.append(TrainingPair(context=context, response=turns[t]))
    return pairs


def build_pool(pairs: list[TrainingPair]) -> UtterancePool:
    """Pool of all utterances appearing in the pairs (contexts and responses)."""
    utts: list[Utterance] = []
    seen: set[tuple[int, ...]] = set()
    for pair in pairs:
        for u in list(pair.context.utterances) + [pair.response]:
            key = tuple(u.token_ids)
            if key not in seen:
                seen.add(key)
                utts.append(u)
    return UtterancePool(utts)


# ---------------------------------------------------------------------------
# Synthetic grammar task
# ---------------------------------------------------------------------------


@dataclass
class TemplateFamily:
    name: str
    context_template: str
    response_templates: list[str]


@dataclass
class SyntheticGrammar:
    """Slot-filling templates whose valid responses are exactly enumerable."""

    families: list[TemplateFamily]
    fillers: list[str]
    _context_index: dict[str, tuple[str, str]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.families) < 2 or len(self.fillers) < 2:
            raise ValueError("grammar needs >= 2 families and >= 2 fillers")
        for fam in self.families:
            if len(fam.response_templates) < 2:
                raise ValueError(f"family {fam.name!r} needs >= 2 valid response templates")
        for fam in self.families:
            for filler in self.fillers:
                ctx = normalize(fam.context_template.format(item=filler))
                if ctx in self._context_index:
                    raise ValueError(f"ambiguous context {ctx!r}")
                self._context_index[ctx] = (fam.name, filler)

    def _family(self, name: str) -> TemplateFamily:
        return next(f for f in self.families if f.name == name)

    def contexts(self) -> list[str]:
        return list(self._context_index)

    def valid_responses(self, context_text: str) -> set[str]:
        key = normalize(context_text)
        if key not in self._context_index:
            return set()
        fam_name, filler = self._context_index[key]
        fam = self._family(fam_name)
        return {normalize(t.format(item=filler)) for t in fam.response_templates}

    def oracle(self, context_text: str, response_text: str) -> int:
        """1 iff the response instantiates a valid template for this context."""
        return int(normalize(response_text) in self.valid_responses(context_text))

    def to_json(self) -> str:
        return json.dumps(
            {
                "families": [
                    {"name": f.name, "context": f.context_template, "responses": f.response_templates}
                    for f in self.families
                ],
                "fillers": self.fillers,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticGrammar":
        obj = json.loads(text)
        families = [
            TemplateFamily(name=f["name"], context_template=f["context"], response_templates=f["responses"])
            for f in obj["families"]
        ]
        return cls(families=families, fillers=obj["fillers"])


def default_grammar() -> SyntheticGrammar:
    fillers = ["tea", "coffee", "pizza", "rice", "soup", "salad", "juice", "bread", "cake", "fish"]
    families = [
        TemplateFamily(
            "like",
            "do you like {item} ?",
            [
                "yes i like {item} very much",
                "no i do not like {item}",
                "i love {item}",
                "{item} is my favorite",
            ],
        ),
        TemplateFamily(
            "stock",
            "do you have any {item} ?",
            [
                "yes we have some {item}",
                "sorry we are out of {item}",
                "we have plenty of {item} today",
            ],
        ),
        TemplateFamily(
            "price",
            "how much is the {item} ?",
            [
                "the {item} costs two dollars",
                "the {item} is three dollars today",
                "that {item} is quite cheap",
            ],
        ),
        TemplateFamily(
            "order",
            "would you like some {item} ?",
            [
                "yes please some {item} sounds great",
                "no thanks i just had {item}",
                "maybe a little {item} later",
            ],
        ),
    ]
    return SyntheticGrammar(families=families, fillers=fillers)


def generate_synthetic(grammar: SyntheticGrammar, n_dialogs: int, rng: np.random.Generator):
    """Two-turn dialogs sampled from the grammar, plus its exact oracle."""
    dialogs: list[list[str]] = []
    for _ in range(n_dialogs):
        fam = grammar.families[int(rng.integers(len(grammar.families)))]
        filler = grammar.fillers[int(rng.integers(len(grammar.fillers)))]
        context = fam.context_template.format(item=filler)
        response = fam.response_templates[int(rng.integers(len(fam.response_templates)))].format(item=filler)
        dialogs.append([context, response])
    return dialogs, grammar.oracle
