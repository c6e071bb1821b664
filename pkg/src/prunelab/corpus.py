"""Corpus I/O and the bundled synthetic utterance generator.

The generator mixes assistant-style requests (slot templates) with short
dictation sentences drawn from a small grammar. Word choice within every
slot is Zipf-weighted, which gives the dev set a real frequency spectrum for
the percentile breakdown.
"""

from __future__ import annotations

import zlib
from collections import Counter
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import IngestionError

_LEX = {
    "name": "mom dad anna ben carla david emma frank grace henry isla jack kate liam mia noah "
    "olivia paul quinn rosa sam tara uma victor wendy xavier yara zoe grandma grandpa lewis "
    "mary joe alice bruno chloe diego elena felix gina hugo ivan julia kevin laura marco nina "
    "oscar petra ruben sofia tomas ursula vera walter yusuf zara",
    "city": "london paris berlin madrid rome tokyo boston chicago denver seattle austin dublin "
    "oslo vienna prague lisbon sydney toronto cairo lima athens bangkok brussels budapest "
    "copenhagen helsinki istanbul jakarta kyoto manila milan montreal mumbai munich nairobi "
    "naples osaka phoenix portland quebec santiago seoul stockholm warsaw zurich",
    "day": "today tomorrow tonight monday tuesday wednesday thursday friday saturday sunday "
    "this weekend next week",
    "hour": "one two three four five six seven eight nine ten eleven twelve",
    "ampm": "a m|p m|in the morning|in the evening|at night",
    "artist": "the beatles|taylor swift|miles davis|adele|coldplay|bob marley|queen|nina simone|"
    "the rolling stones|beyonce|radiohead|johnny cash|daft punk|billie eilish",
    "genre": "jazz rock pop classical country blues reggae techno folk",
    "device": "lights heating fan radio tv alarm timer music",
    "room": "kitchen|bedroom|living room|bathroom|garage|office|hallway|basement|attic|porch",
    "food": "milk eggs bread coffee tea apples rice cheese pizza pasta sushi tacos salad soup "
    "butter yogurt bananas carrots onions garlic potatoes tomatoes lemons oranges chicken "
    "salmon beans lentils flour sugar honey cereal noodles spinach mushrooms peppers",
    "adj": "big small old new red blue quiet happy late early long short warm cold good bad "
    "bright dark busy strange lovely green yellow heavy light empty full clean dirty soft "
    "loud gentle brave calm clever curious famous fancy friendly funny grumpy hungry lazy "
    "nervous polite proud rich shy sleepy tiny wild wise young",
    "noun": "dog cat house car book letter meeting project garden window report friend teacher "
    "city river train phone table plan idea story road morning bicycle bridge castle chair "
    "computer doctor engine farmer forest guitar hospital island jacket kettle ladder "
    "library mountain neighbor notebook painting pencil picture pilot puzzle question "
    "restaurant school shelf singer student summer ticket tower umbrella village wallet "
    "winter answer bottle camera",
    "verb_t": "read wrote found sent saw liked bought cleaned fixed opened closed painted "
    "finished started moved visited carried borrowed checked chose described dropped "
    "followed forgot helped invited kept lost noticed ordered packed pushed reached "
    "remembered repaired showed signed sold watched",
    "verb_i": "arrived left slept laughed waited worked called smiled rested stayed danced "
    "cried jumped listened paused returned shouted sighed travelled whispered",
    "prep": "in near behind after before with under over",
    "det": "the a my your our this that every",
    "adv": "quickly slowly again soon today really almost finally",
}

# Syllables for pseudo-word proper nouns. Drawn once from a fixed stream, they
# give the corpus the long tail of rare names real requests have.
_ONSETS = "b br c ch d dr f g gr h j k kl l m n p pr r s sh st t tr v w z".split()
_NUCLEI = "a e i o u ai ea ie oo ou".split()
_CODAS = ["", "", "", "n", "r", "l", "s", "th", "nd", "rk", "st", "x"]


def _pseudo_words(n: int, seed: int, min_syl: int = 2, max_syl: int = 3) -> str:
    rng = np.random.default_rng(seed)
    out, seen = [], set()
    while len(out) < n:
        k = int(rng.integers(min_syl, max_syl + 1))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))]
            + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(k)
        )
        if w not in seen:
            seen.add(w)
            out.append(w)
    return " ".join(out)


_LEX["surname"] = _pseudo_words(3000, seed=101)
_LEX["street"] = _pseudo_words(600, seed=202)
_LEX["shop"] = _pseudo_words(300, seed=303, min_syl=1, max_syl=2)
_LEX["num"] = " ".join(str(i) for i in range(1, 200))

_TEMPLATES = [
    (8, "call {name}"),
    (5, "call {name} {surname}"),
    (3, "email {name} {surname} about the meeting {day}"),
    (4, "navigate to {num} {street} street"),
    (2, "how long to drive to {street} avenue"),
    (3, "is {shop} open {day}"),
    (2, "find a {food} shop near {street} road"),
    (3, "set a timer for {num} minutes"),
    (4, "call {name} on speaker"),
    (5, "text {name} i will be late"),
    (3, "send a message to {name} saying see you {day}"),
    (7, "what is the weather in {city}"),
    (5, "what is the weather {day}"),
    (3, "will it rain in {city} {day}"),
    (6, "set an alarm for {hour} {ampm}"),
    (4, "set a timer for {hour} minutes"),
    (3, "wake me up at {hour} {ampm}"),
    (6, "play some {genre}"),
    (6, "play {artist}"),
    (3, "play the latest album by {artist}"),
    (5, "turn on the {device}"),
    (5, "turn off the {device} in the {room}"),
    (3, "dim the lights in the {room}"),
    (4, "add {food} to my shopping list"),
    (3, "remind me to buy {food} {day}"),
    (3, "how far is {city} from {city}"),
    (2, "what time is it in {city}"),
    (2, "navigate to {city}"),
    (2, "remind me to call {name} {day}"),
]

_CACHE: dict[str, tuple[list[str], np.ndarray]] = {}


def _choices(slot: str) -> tuple[list[str], np.ndarray]:
    if slot not in _CACHE:
        raw = _LEX[slot]
        words = raw.split("|") if "|" in raw else raw.split()
        w = 1.0 / np.arange(1, len(words) + 1) ** (0.9 if len(words) > 100 else 1.1)
        _CACHE[slot] = (words, w / w.sum())
    return _CACHE[slot]


def _pick(rng, slot: str) -> str:
    words, p = _choices(slot)
    return words[rng.choice(len(words), p=p)]


# topic -> (nouns, transitive verbs, adjectives); a dictation sentence stays on one topic
_TOPICS = {
    "cooking": (
        "recipe oven pan soup sauce onion garlic dough salad kitchen knife spoon bowl "
        "dinner lunch cake butter pepper flour stove kettle plate herbs broth",
        "chopped stirred baked tasted boiled seasoned mixed served grilled peeled",
        "spicy salty sweet fresh crispy hot creamy bitter tender golden",
    ),
    "travel": (
        "flight airport hotel passport ticket suitcase train station map beach island "
        "journey tour guide border luggage cabin harbor ferry visa tent valley coast",
        "booked missed packed visited explored reached crossed rented caught boarded",
        "distant sunny crowded remote foreign cheap scenic delayed narrow rocky",
    ),
    "sports": (
        "match team coach goal ball referee stadium player season league score trophy "
        "helmet bike race track pool court racket medal jersey whistle marathon",
        "kicked won lost scored trained coached passed defended tackled finished",
        "fast strong tired fierce loyal skilled nervous famous young winning",
    ),
    "work": (
        "meeting report manager client deadline office email budget contract invoice "
        "project agenda spreadsheet salary colleague printer schedule desk proposal memo",
        "reviewed signed scheduled approved drafted emailed filed postponed cancelled forwarded",
        "urgent quarterly final annual formal monthly overdue confidential detailed brief",
    ),
    "school": (
        "homework teacher exam lesson class student essay library grade chapter "
        "notebook pencil classroom lecture course diploma quiz semester textbook tutor",
        "studied graded taught learned memorized revised failed passed attended copied",
        "difficult easy boring clever curious careful smart wrong correct tricky",
    ),
    "health": (
        "doctor nurse clinic appointment medicine fever headache vitamin pharmacy "
        "prescription patient hospital injury bandage therapy diet sleep cough pill dentist",
        "prescribed treated examined healed bandaged cured measured injected tested consulted",
        "sick healthy sore painful mild severe chronic weak dizzy calm",
    ),
    "garden": (
        "garden flower tree seed soil rose tomato hedge lawn shovel bucket fence "
        "weed leaf root pot greenhouse compost hose bench berry tulip",
        "planted watered trimmed pruned dug harvested weeded mowed raked sowed",
        "green wild muddy tall blooming leafy dry ripe thorny shady",
    ),
    "tech": (
        "laptop phone screen keyboard password update battery charger printer router "
        "app website server file cable monitor mouse camera tablet backup",
        "installed deleted restarted charged updated downloaded uploaded reset fixed synced",
        "slow broken wireless digital frozen new secure heavy cheap bright",
    ),
    "family": (
        "mother father sister brother baby cousin aunt uncle grandmother grandfather "
        "wedding birthday party gift nephew niece daughter son neighbor family",
        "hugged invited called visited surprised thanked helped raised met greeted",
        "lovely proud happy little kind funny generous patient quiet elderly",
    ),
    "money": (
        "bank account loan payment bill card rent mortgage receipt wallet cash "
        "budget tax coin price discount refund salary savings deposit",
        "paid borrowed saved spent transferred owed withdrew deposited refunded charged",
        "expensive cheap monthly overdue unpaid generous total extra large small",
    ),
}
_SUBJECTS = "i|we|they|she|he|my friend|our team|my boss|the kids|everyone|nobody".split("|")
_LINKS = ("and then", "because", "so", "but", "after that", "while")


def _topic_words(topic: str, kind: int) -> tuple[list[str], np.ndarray]:
    key = f"{topic}/{kind}"
    if key not in _CACHE:
        words = _TOPICS[topic][kind].split()
        w = 1.0 / np.arange(1, len(words) + 1) ** 1.1
        _CACHE[key] = (words, w / w.sum())
    return _CACHE[key]


def _tpick(rng, topic: str, kind: int) -> str:
    words, p = _topic_words(topic, kind)
    return words[rng.choice(len(words), p=p)]


def _noun_phrase(rng, topic: str) -> str:
    parts = [_pick(rng, "det")]
    if rng.random() < 0.5:
        parts.append(_tpick(rng, topic, 2))
    parts.append(_tpick(rng, topic, 0))
    return " ".join(parts)


def _clause(rng, topic: str) -> str:
    u = rng.random()
    if u < 0.12:
        subj = f"{_pick(rng, 'name')} {_pick(rng, 'surname')}"
    elif u < 0.3:
        subj = _pick(rng, "name")
    else:
        subj = _SUBJECTS[rng.integers(len(_SUBJECTS))]
    s = f"{subj} {_tpick(rng, topic, 1)} {_noun_phrase(rng, topic)}"
    if rng.random() < 0.4:
        s += f" {_pick(rng, 'prep')} {_noun_phrase(rng, topic)}"
    return s


def _dictation(rng) -> str:
    topics = list(_TOPICS)
    topic = topics[rng.integers(len(topics))]
    s = _clause(rng, topic)
    while rng.random() < 0.45:
        s += f" {_LINKS[rng.integers(len(_LINKS))]} {_clause(rng, topic)}"
    if rng.random() < 0.2:
        s += f" {_pick(rng, 'adv')}"
    return s


def generate_corpus(n_lines: int, seed: int = 0, dictation_share: float = 0.6) -> list[str]:
    rng = np.random.default_rng(seed)
    weights = np.asarray([w for w, _ in _TEMPLATES], dtype=float)
    weights /= weights.sum()
    lines = []
    for _ in range(n_lines):
        if rng.random() < dictation_share:
            lines.append(_dictation(rng))
            continue
        tmpl = _TEMPLATES[rng.choice(len(_TEMPLATES), p=weights)][1]
        out, rest = [], tmpl
        while "{" in rest:
            pre, _, tail = rest.partition("{")
            slot, _, rest = tail.partition("}")
            out.append(pre + _pick(rng, slot))
        lines.append("".join(out) + rest)
    return lines


def bundled_corpus_path(name: str = "utterances") -> Path:
    """Packaged corpora: ``utterances`` (10k lines) and ``smoke`` (1k lines)."""
    return Path(str(resources.files("prunelab") / "data" / f"{name}.txt"))


def read_corpus(path: str | Path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise IngestionError(f"empty corpus: {path}")
    return lines


def split_train_dev(lines: Sequence[str], dev_fraction: float = 0.05) -> tuple[list[str], list[str]]:
    """Deterministic split by CRC32 of ``"<line number>\t<text>"``."""
    cut = int(round(dev_fraction * 10000))
    train, dev = [], []
    for i, ln in enumerate(lines):
        (dev if zlib.crc32(f"{i}\t{ln}".encode("utf-8")) % 10000 < cut else train).append(ln)
    return train, dev


def word_frequencies(lines: Iterable[str]) -> Counter:
    c: Counter = Counter()
    for ln in lines:
        c.update(ln.split())
    return c


def write_corpus(path: str | Path, n_lines: int, seed: int = 0) -> None:
    Path(path).write_text("".join(ln + "\n" for ln in generate_corpus(n_lines, seed)), encoding="utf-8")


if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser(description="Write a synthetic utterance corpus, one line per utterance.")
    ap.add_argument("path")
    ap.add_argument("--lines", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    write_corpus(a.path, a.lines, a.seed)
