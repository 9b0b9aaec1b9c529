"""Dialogue data model, word-level vocabulary, corpus I/O and a synthetic generator.

The synthetic corpus is built from slot *families* (area, price-range, day, ...)
shared across domains, plus a few per-domain specialized slots. Every user
utterance is assembled from clause templates, so gold states can be recovered
from the text by inverting those templates.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ValidationError
from .seeding import stream

PAD, UNK, EOA, ANSWER = "<pad>", "<unk>", "</a>", "answer"
RESERVED = (PAD, UNK, EOA, ANSWER)
NONE_VALUE = "none"

Slot = tuple[str, str]


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def slot_text(slot: Slot) -> str:
    return f"{slot[0]} {slot[1]}"


# --- data model ------------------------------------------------------------


@dataclass(frozen=True)
class StateTriple:
    domain: str
    slot: str
    value: str

    def __post_init__(self):
        if not self.value.strip():
            raise ValidationError(f"empty value for {self.domain} {self.slot}")
        if normalize_text(self.value) == NONE_VALUE:
            raise ValidationError("absence encodes 'none'; do not store it as a value")

    @property
    def key(self) -> Slot:
        return (self.domain, self.slot)


@dataclass(frozen=True)
class Turn:
    system: str
    user: str
    state: tuple[StateTriple, ...]

    def __post_init__(self):
        keys = [t.key for t in self.state]
        if len(keys) != len(set(keys)):
            raise ValidationError("duplicate (domain, slot) in turn state")

    def state_dict(self) -> dict[Slot, str]:
        return {t.key: t.value for t in self.state}


@dataclass(frozen=True)
class Dialogue:
    id: str
    domains: tuple[str, ...]
    turns: tuple[Turn, ...]


@dataclass(frozen=True)
class Schema:
    domains: dict[str, tuple[str, ...]]
    held_out: tuple[str, ...] = ()
    lexicon: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def slots(self, domains: Iterable[str] | None = None) -> list[Slot]:
        names = self.domains if domains is None else domains
        return [(d, s) for d in names for s in self.domains[d]]

    def train_domains(self) -> list[str]:
        return [d for d in self.domains if d not in self.held_out]

    def train_slots(self) -> list[Slot]:
        return self.slots(self.train_domains())

    def to_json(self) -> dict:
        out = {"domains": {d: list(s) for d, s in self.domains.items()}}
        if self.held_out:
            out["held_out"] = list(self.held_out)
        if self.lexicon:
            out["lexicon"] = {k: list(v) for k, v in self.lexicon.items()}
        return out


class Vocab:
    """Whitespace word vocabulary with reserved ids 0..3 (pad, unk, end-of-answer, 'answer')."""

    def __init__(self, words: Sequence[str]):
        if tuple(words[: len(RESERVED)]) != RESERVED:
            raise ContractError("vocabulary must start with the reserved tokens")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ContractError("duplicate words in vocabulary")

    pad_id = 0
    unk_id = 1
    eoa_id = 2
    answer_id = 3

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in normalize_text(text).split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.words[i] for i in ids)


def build_vocab(texts: Iterable[str]) -> Vocab:
    counts = Counter()
    for text in texts:
        counts.update(normalize_text(text).split())
    for w in RESERVED:
        counts.pop(w, None)
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocab(list(RESERVED) + ordered)


# --- QA prompt rendering ---------------------------------------------------

PROMPT_WORDS = "dialogue : system : user : question : what is the value of ? answer :"


def render_history(turns: Sequence[Turn]) -> str:
    parts = ["dialogue :"]
    for turn in turns:
        parts.append(f"system : {turn.system} user : {turn.user}")
    return " ".join(parts)


def render_question(slot: Slot) -> str:
    return f"question : what is the value of {slot_text(slot)} ? answer :"


def encode_prompt(vocab: Vocab, history: Sequence[Turn], slot: Slot, budget: int) -> list[int]:
    """Token ids of the QA prompt, dropping the oldest turns until it fits ``budget``."""
    question = vocab.encode(render_question(slot))
    start = 0
    while True:
        ids = vocab.encode(render_history(history[start:])) + question
        if len(ids) <= budget:
            return ids
        if start >= len(history):
            raise ContractError(f"question alone needs {len(ids)} tokens, budget is {budget}")
        start += 1


def corpus_texts(schema: Schema, dialogues: Iterable[Dialogue]) -> list[str]:
    texts = [PROMPT_WORDS, NONE_VALUE]
    texts.extend(slot_text(s) for s in schema.slots())
    for values in schema.lexicon.values():
        texts.extend(values)
    for dlg in dialogues:
        for turn in dlg.turns:
            texts.append(turn.system)
            texts.append(turn.user)
            texts.extend(t.value for t in turn.state)
    return texts


# --- JSON I/O --------------------------------------------------------------


def dialogue_to_json(dlg: Dialogue) -> dict:
    return {
        "id": dlg.id,
        "domains": list(dlg.domains),
        "turns": [
            {
                "system": t.system,
                "user": t.user,
                "state": [{"domain": s.domain, "slot": s.slot, "value": s.value} for s in t.state],
            }
            for t in dlg.turns
        ],
    }


def dump_corpus(schema: Schema, dialogues: Sequence[Dialogue]) -> str:
    doc = {"schema": schema.to_json(), "dialogues": [dialogue_to_json(d) for d in dialogues]}
    return json.dumps(doc, indent=1, ensure_ascii=False) + "\n"


def save_corpus(path: str | Path, schema: Schema, dialogues: Sequence[Dialogue]) -> None:
    Path(path).write_text(dump_corpus(schema, dialogues), encoding="utf-8")


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ValidationError(f"{where}: {msg}")


def parse_corpus(doc) -> tuple[Schema, list[Dialogue]]:
    _require(isinstance(doc, dict), "$", "top level must be an object")
    _require(isinstance(doc.get("schema"), dict), "$.schema", "missing or not an object")
    raw_domains = doc["schema"].get("domains")
    _require(isinstance(raw_domains, dict) and raw_domains, "$.schema.domains", "missing or empty")
    domains = {}
    for name, slots in raw_domains.items():
        where = f"$.schema.domains.{name}"
        _require(isinstance(slots, list) and all(isinstance(s, str) for s in slots), where,
                 "slot list must be a list of strings")
        _require(len(slots) == len(set(slots)), where, "slot names must be unique")
        domains[name] = tuple(slots)
    held_out = tuple(doc["schema"].get("held_out", ()))
    for d in held_out:
        _require(d in domains, "$.schema.held_out", f"unknown domain {d!r}")
    lexicon = {k: tuple(v) for k, v in doc["schema"].get("lexicon", {}).items()}
    schema = Schema(domains, held_out, lexicon)

    raw_dialogues = doc.get("dialogues")
    _require(isinstance(raw_dialogues, list), "$.dialogues", "missing or not a list")
    dialogues = []
    for i, raw in enumerate(raw_dialogues):
        where = f"$.dialogues[{i}]"
        _require(isinstance(raw, dict), where, "not an object")
        _require(isinstance(raw.get("id"), str), f"{where}.id", "missing string id")
        dlg_domains = raw.get("domains", [])
        for d in dlg_domains:
            _require(d in domains, f"{where}.domains", f"unknown domain {d!r}")
        raw_turns = raw.get("turns")
        _require(isinstance(raw_turns, list) and raw_turns, f"{where}.turns", "missing or empty")
        turns = []
        for j, rt in enumerate(raw_turns):
            tw = f"{where}.turns[{j}]"
            _require(isinstance(rt, dict), tw, "not an object")
            _require(isinstance(rt.get("system"), str) and isinstance(rt.get("user"), str), tw,
                     "system and user must be strings")
            triples, seen = [], set()
            for k, st in enumerate(rt.get("state", [])):
                sw = f"{tw}.state[{k}]"
                _require(isinstance(st, dict), sw, "not an object")
                dom, slot, value = st.get("domain"), st.get("slot"), st.get("value")
                _require(all(isinstance(x, str) for x in (dom, slot, value)), sw,
                         "domain, slot and value must be strings")
                _require(dom in domains, sw, f"unknown domain {dom!r}")
                _require(slot in domains[dom], sw, f"unknown slot {slot!r} for {dom}")
                _require(value.strip() != "", sw, "empty value")
                _require((dom, slot) not in seen, sw, f"duplicate slot {dom} {slot}")
                seen.add((dom, slot))
                try:
                    triples.append(StateTriple(dom, slot, value))
                except ValidationError as exc:
                    raise ValidationError(f"{sw}: {exc}") from exc
            turns.append(Turn(rt["system"], rt["user"], tuple(triples)))
        dialogues.append(Dialogue(raw["id"], tuple(dlg_domains), tuple(turns)))
    return schema, dialogues


def load_corpus(path: str | Path) -> tuple[Schema, list[Dialogue]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc})") from exc
    return parse_corpus(doc)


def corpus_stats(dialogues: Sequence[Dialogue]) -> dict[str, int]:
    slots, values = set(), set()
    for dlg in dialogues:
        for turn in dlg.turns:
            for t in turn.state:
                slots.add(t.key)
                values.add(t.value)
    return {
        "dialogues": len(dialogues),
        "turns": sum(len(d.turns) for d in dialogues),
        "slots": len(slots),
        "values": len(values),
    }


# --- synthetic generator ---------------------------------------------------

LEXICON: dict[str, tuple[str, ...]] = {
    "area": ("north", "south", "east", "west", "centre"),
    "price-range": ("cheap", "moderate", "expensive"),
    "name": ("golden house", "river lodge", "blue door", "kings arms", "old mill",
             "grand view", "little rose", "city stop"),
    "day": ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"),
    "time": ("08:00", "09:15", "10:30", "11:45", "13:00", "14:15", "16:30", "18:45", "20:00"),
    "people": ("1", "2", "3", "4", "5", "6", "7", "8"),
    "place": ("cambridge", "london", "ely", "norwich", "stevenage", "oxford", "leicester",
              "bristol"),
    "parking": ("yes", "no"),
    "stars": ("2", "3", "4", "5"),
    "food": ("indian", "chinese", "italian", "thai", "french", "british"),
    "type": ("museum", "college", "theatre", "gallery", "pool"),
}

# slot name -> value family
SLOT_FAMILY: dict[str, str] = {
    "area": "area", "price-range": "price-range", "name": "name", "day": "day",
    "people": "people", "time": "time", "leave-at": "time", "arrive-by": "time",
    "departure": "place", "destination": "place", "parking": "parking",
    "stars": "stars", "food": "food", "type": "type",
}

CLAUSES: dict[str, str] = {
    "area": "in the {v} area",
    "price-range": "in the {v} price range",
    "name": "called {v}",
    "day": "on {v}",
    "people": "for {v} people",
    "time": "at {v}",
    "leave-at": "leaving after {v}",
    "arrive-by": "arriving by {v}",
    "departure": "from {v}",
    "destination": "going to {v}",
    "stars": "with {v} stars",
    "food": "serving {v} food",
    "type": "that is a {v}",
}
# slots whose value is stated indirectly
MAPPED_CLAUSES: dict[str, dict[str, str]] = {
    "parking": {"yes": "with free parking", "no": "with no parking"},
}

DEFAULT_SCHEMA_SPEC: dict = {
    "domains": {
        "hotel": ["area", "price-range", "name", "day", "people", "parking", "stars"],
        "restaurant": ["area", "price-range", "name", "food", "day", "time", "people"],
        "attraction": ["area", "name", "type", "price-range"],
        "taxi": ["departure", "destination", "leave-at", "arrive-by"],
        "train": ["departure", "destination", "day", "leave-at", "arrive-by", "people"],
        "flight": ["departure", "destination", "day", "leave-at", "people"],
    },
    "held_out": ["flight"],
}

SHARED_FAMILIES = ("area", "price-range", "name", "day", "time", "people", "place")

GREETING = "hello , how can i help you ?"


def render_clause(slot: str, value: str) -> str:
    if slot in MAPPED_CLAUSES:
        return MAPPED_CLAUSES[slot][value]
    return CLAUSES[slot].format(v=value)


CONFIRM_STYLES = ("{d} {s} : {v}", "the {d} {s} is {v}", "the {d} {s} is set to {v}",
                  "the value of {d} {s} is {v}")
CLOSINGS = ("anything else ?", "any other question ?")


def render_confirmation(items: Sequence[tuple[str, str, str]], style: int = 0) -> str:
    """System read-back of ``(domain, slot, value)`` triples."""
    form = CONFIRM_STYLES[style]
    return "ok , " + " , ".join(form.format(d=d, s=s, v=v) for d, s, v in items) + " ."


def render_user(domain: str, items: Sequence[tuple[str, str]], first: bool,
                declined: str | None = None) -> str:
    """User turn stating ``items``; ``declined`` names a slot the user has no preference on."""
    lead = f"i need a {domain}" if first else f"the {domain} should be"
    text = lead + " " + " and ".join(render_clause(s, v) for s, v in items)
    return text if declined is None else f"to answer your question , any {declined} is fine , {text}"


def invert_user(text: str) -> tuple[str, dict[str, str]]:
    """Recover (domain, {slot: value}) from a user utterance built by :func:`render_user`.

    A declined slot carries no value and is not reported.
    """
    m = re.fullmatch(r"(?:to answer your question , any \S+ is fine , )?(?:i need a|the) (\S+)(?: should be)? (.*)", text)
    if m is None:
        raise ValidationError(f"utterance does not match a template: {text!r}")
    domain, rest = m.group(1), m.group(2)
    found = {}
    for clause in rest.split(" and "):
        found.update(_invert_clause(clause))
    return domain, found


def _invert_clause(clause: str) -> dict[str, str]:
    for slot, mapping in MAPPED_CLAUSES.items():
        for value, text in mapping.items():
            if clause == text:
                return {slot: value}
    for slot, template in CLAUSES.items():
        pattern = "^" + re.escape(template).replace(re.escape("{v}"), "(.+)") + "$"
        m = re.match(pattern, clause)
        if m:
            return {slot: m.group(1)}
    raise ValidationError(f"clause does not match a template: {clause!r}")


def _check_spec(spec: dict) -> None:
    domains = spec["domains"]
    held = spec.get("held_out", [])
    train = [d for d in domains if d not in held]
    if not held or not train:
        raise ContractError("schema spec needs at least one train and one held-out domain")
    for d, slots in domains.items():
        for s in slots:
            if s not in SLOT_FAMILY:
                raise ContractError(f"slot {s!r} of {d} has no value family")
    train_families = {SLOT_FAMILY[s] for d in train for s in domains[d]}
    for d in held:
        shared = {SLOT_FAMILY[s] for s in domains[d]} & train_families
        if not shared:
            raise ContractError(f"held-out domain {d!r} shares no slot family with training")


def _sample_goal(rng: np.random.Generator, schema_spec: dict, domain: str, max_slots: int):
    slots = list(schema_spec["domains"][domain])
    n = int(rng.integers(1, min(max_slots, len(slots)) + 1))
    chosen = [slots[i] for i in sorted(rng.choice(len(slots), size=n, replace=False))]
    rng.shuffle(chosen)
    goal = []
    for s in chosen:
        values = LEXICON[SLOT_FAMILY[s]]
        goal.append((s, values[int(rng.integers(len(values)))]))
    return goal


def _make_dialogue(rng: np.random.Generator, schema_spec: dict, dlg_id: str,
                   domains: list[str]) -> Dialogue:
    max_slots = 4 if len(domains) == 1 else 2
    plan = []  # (domain, items, first-mention)
    goals = {}
    for d in domains:
        goal = _sample_goal(rng, schema_spec, d, max_slots)
        goals[d] = {s for s, _ in goal}
        i, first = 0, True
        while i < len(goal):
            step = 1 if i == len(goal) - 1 else int(rng.integers(1, 3))
            plan.append((d, goal[i:i + step], first))
            i += step
            first = False

    turns, state = [], {}
    said: dict[Slot, str] = {}  # everything the user has stated, declines as "none"
    for d, items, first in plan:
        declined = None
        if not said:
            system = GREETING
        else:
            # read back the latest turn plus a random subset of earlier ones, shuffled
            keys = [k for k in said if k in latest or rng.random() < 0.5]
            keys = [keys[i] for i in rng.permutation(len(keys))]
            style = int(rng.integers(len(CONFIRM_STYLES)))
            confirm = render_confirmation([(dd, ss, said[(dd, ss)]) for dd, ss in keys], style)
            open_slots = [x for x in schema_spec["domains"][d]
                          if x not in goals[d] and (d, x) not in said]
            if rng.random() < 0.5:
                asked = items[0][0]
                if open_slots and rng.random() < 0.5:
                    asked = declined = open_slots[int(rng.integers(len(open_slots)))]
                system = f"{confirm} what {asked} do you want for the {d} ?"
            else:
                system = f"{confirm} {CLOSINGS[int(rng.integers(len(CLOSINGS)))]}"
        user = render_user(d, items, first, declined)
        latest = {(d, s) for s, _ in items}
        if declined is not None:
            said[(d, declined)] = NONE_VALUE
            latest.add((d, declined))
        for s, v in items:
            state[(d, s)] = said[(d, s)] = v
        triples = tuple(StateTriple(dd, ss, vv) for (dd, ss), vv in state.items())
        turns.append(Turn(system, user, triples))
    return Dialogue(dlg_id, tuple(domains), tuple(turns))


def generate_synthetic(seed: int, n_dialogues: int, schema_spec: dict | None = None,
                       n_test: int | None = None) -> tuple[Schema, list[Dialogue], list[Dialogue]]:
    """Generate ``n_dialogues`` train and ``n_test`` test dialogues.

    Held-out domains occur only in the test split, which mixes single-domain
    held-out dialogues (two thirds) with ordinary train-domain dialogues.
    """
    spec = DEFAULT_SCHEMA_SPEC if schema_spec is None else schema_spec
    if n_dialogues < 1:
        raise ContractError("n_dialogues must be positive")
    _check_spec(spec)
    n_test = n_dialogues // 3 if n_test is None else n_test
    rng = stream(seed, "corpus")
    held = list(spec.get("held_out", []))
    train_domains = [d for d in spec["domains"] if d not in held]

    def pick_train_domains() -> list[str]:
        k = 2 if (len(train_domains) > 1 and rng.random() < 0.3) else 1
        idx = rng.choice(len(train_domains), size=k, replace=False)
        return [train_domains[i] for i in idx]

    train = [_make_dialogue(rng, spec, f"train-{i:05d}", pick_train_domains())
             for i in range(n_dialogues)]
    test = []
    for i in range(n_test):
        if rng.random() < 2 / 3:
            doms = [held[int(rng.integers(len(held)))]]
        else:
            doms = pick_train_domains()
        test.append(_make_dialogue(rng, spec, f"test-{i:05d}", doms))

    families = {SLOT_FAMILY[s] for slots in spec["domains"].values() for s in slots}
    schema = Schema(
        {d: tuple(s) for d, s in spec["domains"].items()},
        tuple(held),
        {f: LEXICON[f] for f in sorted(families)},
    )
    return schema, train, test


def generate_lm_dialogues(seed: int, n_dialogues: int,
                          schema_spec: dict | None = None) -> list[Dialogue]:
    """Unsupervised pretraining text: dialogues over every domain, held-out ones included.

    Drawn from a random stream disjoint from :func:`generate_synthetic` for the same seed.
    """
    spec = DEFAULT_SCHEMA_SPEC if schema_spec is None else schema_spec
    if n_dialogues < 1:
        raise ContractError("n_dialogues must be positive")
    _check_spec(spec)
    rng = stream(seed, "lm-corpus")
    domains = list(spec["domains"])
    out = []
    for i in range(n_dialogues):
        k = 2 if rng.random() < 0.3 else 1
        picked = [domains[j] for j in rng.choice(len(domains), size=k, replace=False)]
        out.append(_make_dialogue(rng, spec, f"lm-{i:05d}", picked))
    return out

