"""Deterministic fixtures: the Bob residence timeline, random session streams, migration instances."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np

from .substrate import Session, format_instant

DAY = 86_400

BOB_QUERY = "Where did Bob live before moving to Miami?"
BOB_SUBQUERY = "residence immediately before the Miami move"
BOB_DAVIS = "Bob moved from Boston to Davis."
BOB_MIAMI = "Bob moved from Davis to Miami in July 2024."
BOB_HOUSE = "Bob bought a house in Miami."

# distractors: other people, each pinned at a fixed cosine to the query direction
BOB_DISTRACTORS = [
    ("Carol adopted a beagle named Pepper.", 0.90),
    ("Dana started a new job at Acme Robotics.", 0.86),
    ("Evan visited Lisbon for a conference.", 0.82),
    ("Farah baked sourdough bread with Gina.", 0.78),
    ("Hugo joined a chess club in Portland.", 0.74),
    ("Iris bought a used Subaru Outback.", 0.70),
    ("Jonah ran the Chicago marathon.", 0.66),
    ("Kira painted a mural for Oakridge Library.", 0.62),
    ("Liam learned guitar from Marco.", 0.58),
    ("Nora planted tomatoes with Priya.", 0.54),
]


def _e(dim: int, i: int) -> np.ndarray:
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def bob_embedding_overrides(dim: int = 16) -> dict[str, list[float]]:
    """Adversarial layout: the Miami move sits on the query direction, the Davis move is orthogonal."""
    if dim < 4 + len(BOB_DISTRACTORS):
        raise ValueError(f"the Bob layout needs at least {4 + len(BOB_DISTRACTORS)} dimensions")
    table = {
        BOB_QUERY: _e(dim, 0),
        BOB_MIAMI: _e(dim, 0),
        BOB_DAVIS: _e(dim, 1),
        BOB_HOUSE: 0.5 * _e(dim, 0) + math.sqrt(0.75) * _e(dim, 2),
    }
    for i, (text, cos) in enumerate(BOB_DISTRACTORS):
        table[text] = cos * _e(dim, 0) + math.sqrt(1 - cos * cos) * _e(dim, 4 + i)
    return {k: [float(x) for x in v] for k, v in table.items()}


def bob_sessions() -> list[Session]:
    def sess(sid, date, user, reply="That is good to know."):
        return Session.from_json({"session_id": sid, "timestamp": date,
                                  "turns": [{"role": "user", "content": user},
                                            {"role": "assistant", "content": reply}]})

    out = [sess("bob-2023-05", "2023-05-14", BOB_DAVIS)]
    for i, (text, _) in enumerate(BOB_DISTRACTORS):
        out.append(sess(f"other-{i:02d}", f"2023-{7 + i // 4:02d}-{1 + 7 * (i % 4):02d}", text))
    out.append(sess("bob-2024-07", "2024-07-20", BOB_MIAMI))
    out.append(sess("bob-2025-01", "2025-01-09", BOB_HOUSE))
    return [Session(s.session_id, s.turns, i) for i, s in enumerate(out)]


def bob_planner_script() -> dict[str, str]:
    return {"entity:bob": BOB_SUBQUERY}


def bob_chooser_script() -> dict[str, list]:
    # the Bob tree is a root over three time-ordered leaves: Davis, Miami, house
    return {BOB_SUBQUERY: [[0]]}


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

PEOPLE = ["Alice", "Bob", "Carol", "Dana", "Evan", "Farah", "Gina", "Hugo", "Iris", "Jonah",
          "Kira", "Liam", "Marco", "Nora", "Omar", "Priya", "Quinn", "Rosa", "Sven", "Tara"]
PLACES = ["Boston", "Davis", "Miami", "Lisbon", "Portland", "Austin", "Denver", "Seattle",
          "Chicago", "Toronto", "Madrid", "Oslo", "Kyoto", "Nairobi", "Lima", "Perth"]
PETS = ["Pepper", "Rex", "Milo", "Luna", "Biscuit", "Ziggy"]
TEMPLATES = [
    "{p} moved from {a} to {b}.",
    "{p} visited {a} with {q}.",
    "{p} started a new job in {a}.",
    "{p} adopted a dog named {pet}.",
    "{p} cooked dinner for {q} in {a}.",
    "{p} bought a house in {a}.",
    "{p} ran a race in {a}.",
    "{p} learned guitar from {q}.",
    "{p} went hiking near {a} with {q}.",
    "{p} married {q} in {a}.",
]
FILLER = ["Sounds great!", "How was it?", "Thanks for sharing.", "ok", "Tell me more about that?"]


def random_sentence(rng: random.Random, people=PEOPLE, places=PLACES) -> str:
    p, q = rng.sample(people, 2)
    a, b = rng.sample(places, 2)
    return rng.choice(TEMPLATES).format(p=p, q=q, a=a, b=b, pet=rng.choice(PETS))


def random_sessions(rng: random.Random, n: int, start: int = 1_650_000_000, prefix: str = "s",
                    people=PEOPLE, places=PLACES, max_turns: int = 6, repeat_p: float = 0.15) -> list[Session]:
    """A time-ordered stream of short dialogues; some facts repeat across sessions."""
    said: list[str] = []
    out = []
    ts = start
    for i in range(n):
        ts += rng.randint(1, 20) * DAY
        turns = []
        for j in range(rng.randint(1, max_turns)):
            if j % 2 == 0:
                k = rng.randint(1, 2)
                parts = []
                for _ in range(k):
                    if said and rng.random() < repeat_p:
                        parts.append(rng.choice(said))
                    else:
                        s = random_sentence(rng, people, places)
                        said.append(s)
                        parts.append(s)
                turns.append({"role": "user", "content": " ".join(parts),
                              "timestamp": format_instant(ts + 60 * j)})
            else:
                turns.append({"role": "assistant", "content": rng.choice(FILLER),
                              "timestamp": format_instant(ts + 60 * j)})
        out.append(Session.from_json({"session_id": f"{prefix}{i:04d}", "turns": turns}, arrival_seq=i))
    return out


@dataclass(frozen=True)
class MigrationSpec:
    instances: int = 8
    sessions_per_instance: int = 12
    shared_people: int = 6
    own_people: int = 4
    seed: int = 7


def migration_instances(spec: MigrationSpec = MigrationSpec()) -> list[list[Session]]:
    """Independent users' histories that share a pool of common entities and places.

    Every instance has its own people plus a few drawn from a shared pool, so
    later instances increasingly land in scopes that already exist.
    """
    rng = random.Random(spec.seed)
    shared = PEOPLE[: spec.shared_people]
    out = []
    for i in range(spec.instances):
        tag = "".join(chr(ord("a") + int(d)) for d in str(i))
        own = [f"{name}{tag}" for name in ("Avery", "Blake", "Casey", "Drew", "Emery", "Finley")[: spec.own_people]]
        people = own + rng.sample(shared, k=min(3, len(shared)))
        sessions = random_sessions(random.Random(spec.seed * 1000 + i), spec.sessions_per_instance,
                                   start=1_650_000_000 + i * 3 * DAY, prefix=f"i{i}-", people=people,
                                   repeat_p=0.1)
        out.append(sessions)
    return out
