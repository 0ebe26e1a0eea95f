"""Seeded synthetic corpora with planted evidence, contradictions and distractors."""

from __future__ import annotations

import datetime as dt
import random
from dataclasses import dataclass

from .core import Role, Session, Turn
from .evaluation import BenchmarkQuestion
from .textutil import content_words

BASE_DATE = dt.date(2023, 1, 2)

NOUNS = """
anchor apron badge banjo barrel basket beacon blanket bonnet bottle bracelet bucket
cabinet candle canoe canvas carpet cello chisel cloak compass cradle crayon crystal
cushion dagger drum easel engine fiddle flask flute fountain gadget glider goblet
hammock harp helmet hinge hourglass jacket kettle kite ladder lantern locket loom
mallet mantel marble mitten mirror mosaic napkin necklace oar orchard paddle pendant
piano pillow pitcher plank pouch quilt radio rake ribbon saddle satchel scarf scooter
shovel sled spindle statue stool sundial tablet tambourine teapot telescope tent
thimble torch trellis trombone trumpet tulip turbine ukulele umbrella valve vase
velvet wagon wallet whistle windmill wreath yarn zither abacus accordion almanac amulet
anvil armchair bagpipe bellows birdcage bobbin bookend brooch buckle cauldron chalice
chandelier clarinet cobweb cufflink doorbell dulcimer eggcup fishbowl flagpole footstool
gazebo girder gramophone hatbox horseshoe inkwell jukebox kayak keystone lectern
""".split()

FILLER = """
haha yeah cool anyway lol hmm right sure totally nice wow neat great fun whatever
alright huh gotcha bye later
""".split()

SYLLABLES = "ka lo mi ze ru ta vo ni sa pe do fu gi ha ju be ro li".split()


def _name(rng: random.Random, taken: set[str]) -> str:
    while True:
        word = "".join(rng.choice(SYLLABLES) for _ in range(3)).capitalize()
        if word not in taken:
            taken.add(word)
            return word


def _session(sid: str, day: int, user_lines: list[str], assistant: str = "Got it.") -> Session:
    turns = []
    for line in user_lines:
        turns.append(Turn(Role.USER, line, len(turns)))
        turns.append(Turn(Role.ASSISTANT, assistant, len(turns)))
    return Session(sid, BASE_DATE + dt.timedelta(days=day), tuple(turns))


def vocab_overlap(distractor: str, evidence: str) -> float:
    """Share of the evidence's content words that also occur in the distractor."""
    ev = set(content_words(evidence))
    return len(ev & set(content_words(distractor))) / len(ev) if ev else 0.0


@dataclass
class PlantedCorpus:
    sessions: list[Session]
    questions: list[BenchmarkQuestion]
    key_sentences: dict[str, str]  # evidence session -> planted sentence
    distractor_overlap: list[float]


def planted_benchmark(
    seed: int = 0,
    n_questions: int = 20,
    n_sessions: int = 100,
    heavy_fraction: float = 0.5,
    filler_repeats: int = 6,
) -> PlantedCorpus:
    """Question-answering corpus with one evidence session per question.

    Each evidence session opens with a planted sentence that holds every content word
    of its question, then rambles in repeated filler. Distractors are short and reuse
    at least half of the planted sentence's content words. Some questions get more
    distractors than others (``heavy_fraction``), which is where ranking whole
    sessions by raw-text similarity falls behind ranking extracted memory.
    """
    rng = random.Random(seed)
    n_distract = n_sessions - n_questions
    if n_distract < n_questions:
        raise ValueError("need at least one distractor per question")
    heavy = int(round(n_questions * heavy_fraction))
    # Heavy questions get base+2 distractors, light ones base-2 (or what is left).
    per_q = [n_distract // n_questions] * n_questions
    for i in range(heavy):
        j = n_questions - 1 - i
        if per_q[j] >= 3:
            per_q[i] += 2
            per_q[j] -= 2
    rest = n_distract - sum(per_q)
    for i in range(rest):
        per_q[i % n_questions] += 1

    nouns = NOUNS[:]
    rng.shuffle(nouns)
    if len(nouns) < 6 * n_questions:
        raise ValueError("vocabulary too small for that many questions")
    names: set[str] = set()
    questions: list[BenchmarkQuestion] = []
    key_sentences: dict[str, str] = {}
    overlaps: list[float] = []
    groups: list[list[tuple[str, list[str]]]] = []

    for qi in range(n_questions):
        w = nouns[6 * qi : 6 * qi + 6]
        answer = _name(rng, names)
        key = f"My {w[0]} {w[1]} from the {w[2]} {w[3]} is called {answer}."
        filler = [" ".join(rng.choice(FILLER) for _ in range(4)) for _ in range(2)]
        lines = [key] + [f for f in filler for _ in range(filler_repeats)]
        group = [("evidence", lines)]
        for _ in range(per_q[qi]):
            shared = rng.sample(w[:4], 3)
            place = _name(rng, names)
            text = f"I noticed a {shared[0]} {shared[1]} and a {shared[2]} {w[4]} near {place} with my {w[5]}."
            overlaps.append(vocab_overlap(text, key))
            group.append(("distractor", [text]))
        groups.append(group)
        questions.append(
            BenchmarkQuestion(
                question_id=f"q{qi:03d}",
                question_text=f"What is my {w[0]} {w[1]} from the {w[2]} {w[3]} called?",
                answer_text=answer,
                evidence_session_ids=(),
                question_type="planted",
            )
        )

    # Interleave groups so evidence is not always first in corpus order.
    flat_items: list[tuple[int, str, list[str]]] = [(qi, kind, lines) for qi, g in enumerate(groups) for kind, lines in g]
    rng.shuffle(flat_items)
    sessions: list[Session] = []
    evidence_of: dict[int, str] = {}
    for i, (qi, kind, lines) in enumerate(flat_items):
        sid = f"synth/s{i:03d}"
        sessions.append(_session(sid, i, lines))
        if kind == "evidence":
            evidence_of[qi] = sid
            key_sentences[sid] = lines[0]
    all_ids = tuple(s.session_id for s in sessions)
    final_q = [
        BenchmarkQuestion(
            q.question_id,
            q.question_text,
            q.answer_text,
            (evidence_of[qi],),
            q.question_type,
            BASE_DATE + dt.timedelta(days=len(sessions) + 1),
            all_ids,
        )
        for qi, q in enumerate(questions)
    ]
    return PlantedCorpus(sessions, final_q, key_sentences, overlaps)


@dataclass
class MaintenanceCorpus:
    sessions: list[Session]
    contradictions: dict[str, tuple[str, str]]  # subject prefix -> (old fact, new fact)
    duplicates: list[str]


def maintenance_corpus(
    seed: int = 0, n_sessions: int = 50, n_contradictions: int = 20, n_duplicates: int = 30, facts_per_session: int = 2
) -> MaintenanceCorpus:
    """Base sessions state facts; later sessions restate or contradict them.

    Every fact reads "My <a> <b> is <Value>." with a distinct (a, b) subject, so
    subject collisions only happen where a contradiction is planted.
    """
    rng = random.Random(seed)
    n_base_facts = n_contradictions + n_duplicates
    base_sessions = -(-n_base_facts // facts_per_session)
    later = n_sessions - base_sessions
    if later * facts_per_session < n_contradictions + n_duplicates:
        raise ValueError("not enough sessions for the planted events")
    nouns = NOUNS[:]
    rng.shuffle(nouns)
    subjects = [(nouns[2 * i], nouns[2 * i + 1]) for i in range(n_base_facts)]
    names: set[str] = set()
    base = [f"My {a} {b} is {_name(rng, names)}." for a, b in subjects]
    events: list[str] = []
    contradictions: dict[str, tuple[str, str]] = {}
    for i in range(n_contradictions):
        a, b = subjects[i]
        new = f"My {a} {b} is {_name(rng, names)}."
        contradictions[f"my {a} {b}"] = (base[i], new)
        events.append(new)
    duplicates = [base[i] for i in range(n_contradictions, n_base_facts)]
    events.extend(duplicates)
    rng.shuffle(events)

    sessions = []
    day = 0
    for i in range(base_sessions):
        lines = base[i * facts_per_session : (i + 1) * facts_per_session]
        sessions.append(_session(f"maint/s{len(sessions):03d}", day, lines))
        day += 1
    chunks = [events[i : i + facts_per_session] for i in range(0, len(events), facts_per_session)]
    for i in range(later):
        lines = chunks[i] if i < len(chunks) else ["just checking in today"]
        sessions.append(_session(f"maint/s{len(sessions):03d}", day, lines))
        day += 1
    return MaintenanceCorpus(sessions, contradictions, duplicates)


PEOPLE = "Alice Bruno Chen Dmitri Elena Farid Greta Hiro Ines Jonas Kemal Lena Mateo Nadia Omar Priya".split()
PLACES = "Paris Lisbon Osaka Denver Nairobi Oslo Lima Hanoi Quebec Tbilisi Austin Perth".split()
THINGS = "guitar marathon sourdough chess telescope kayak pottery violin garden novel".split()
WHEN = ["yesterday", "last week", "last month", "two days ago", "on March 3rd", "today", "last weekend"]


def graph_corpus(seed: int = 0, n_sessions: int = 500) -> list[Session]:
    """Sessions mentioning a small recurring cast, so entities align across sessions."""
    rng = random.Random(seed)
    sessions = []
    for i in range(n_sessions):
        lines = []
        for _ in range(rng.randint(1, 3)):
            form = rng.randrange(4)
            if form == 0:
                lines.append(f"I visited {rng.choice(PLACES)} with my friend {rng.choice(PEOPLE)} {rng.choice(WHEN)}.")
            elif form == 1:
                lines.append(f"I practiced {rng.choice(THINGS)} for {rng.randint(1, 9)} hours {rng.choice(WHEN)}.")
            elif form == 2:
                lines.append(f"My colleague {rng.choice(PEOPLE)} moved to {rng.choice(PLACES)}.")
            else:
                lines.append(f"hmm, {rng.choice(FILLER)} {rng.choice(FILLER)}")
        sessions.append(_session(f"graph/s{i:04d}", i % 365, lines))
    return sessions


def chatter_corpus(seed: int = 0, n_sessions: int = 40, chatter_fraction: float = 0.4) -> list[Session]:
    """Mix of informative sessions and pure small talk (for the prejudge filter)."""
    rng = random.Random(seed)
    small_talk = ["ok thanks", "hi", "lol", "bye", "sure", "thanks a lot"]
    sessions = []
    for i in range(n_sessions):
        if rng.random() < chatter_fraction:
            lines = [rng.choice(small_talk)]
        else:
            lines = [f"I bought a {rng.choice(THINGS)} in {rng.choice(PLACES)} for {rng.randint(10, 500)} dollars."]
        sessions.append(_session(f"chat/s{i:03d}", i, lines))
    return sessions


def to_longmemeval(corpus: PlantedCorpus) -> list[dict]:
    """Render a planted corpus in the LongMemEval question-file layout."""
    by_id = {s.session_id: s for s in corpus.sessions}
    hay_ids = [s.session_id for s in corpus.sessions]
    hay = [[{"role": t.role.value, "content": t.text} for t in by_id[sid].turns] for sid in hay_ids]
    dates = [by_id[sid].date.strftime("%Y/%m/%d") for sid in hay_ids]
    return [
        {
            "question_id": q.question_id,
            "question_type": q.question_type,
            "question": q.question_text,
            "answer": q.answer_text,
            "question_date": q.question_date.strftime("%Y/%m/%d"),
            "haystack_session_ids": hay_ids,
            "haystack_dates": dates,
            "haystack_sessions": hay,
            "answer_session_ids": list(q.evidence_session_ids),
        }
        for q in corpus.questions
    ]
