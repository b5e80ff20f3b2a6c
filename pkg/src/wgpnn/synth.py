"""Synthetic periodic temporal knowledge graphs with a known next object."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PeriodicGenerator:
    """Every ``(s, p)`` pair emits one event per timestamp, cycling through ``period`` objects.

    For predicate ``p`` the object at phase ``k = t mod period`` is
    ``(perm_p[s] + k * step_p) mod num_entities``. For fixed ``p`` and ``t``
    this is a bijection in ``s``, so subject queries are deterministic too.
    Noise events are uniform random triples added on top, making up a
    ``noise`` fraction of all lines.
    """

    num_entities: int = 8
    num_predicates: int = 2
    period: int = 2
    horizon: int = 200
    noise: float = 0.0
    seed: int = 0
    time_step: int = 1
    perms: tuple = field(init=False, repr=False)
    steps: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.period < 2:
            raise ValueError("period must be at least 2")
        if self.horizon < 3 * self.period:
            raise ValueError("horizon must be at least 3 * period")
        if self.period > self.num_entities:
            raise ValueError("period cannot exceed the number of entities")
        if not 0 <= self.noise < 1:
            raise ValueError("noise must lie in [0, 1)")
        rng = np.random.default_rng(self.seed)
        n = self.num_entities
        # steps whose first `period` multiples are distinct mod n
        valid = [s for s in range(1, n) if n // math.gcd(s, n) >= self.period]
        perms, steps = [], []
        for _ in range(self.num_predicates):
            perms.append(tuple(int(x) for x in rng.permutation(n)))
            steps.append(int(rng.choice(valid)))
        object.__setattr__(self, "perms", tuple(perms))
        object.__setattr__(self, "steps", tuple(steps))
        object.__setattr__(self, "_rng_state", rng.bit_generator.state)

    def object_at(self, subject, predicate, timestamp):
        phase = (timestamp // self.time_step) % self.period
        return (self.perms[predicate][subject] + phase * self.steps[predicate]) % self.num_entities

    def events(self):
        """``(subject, predicate, object, timestamp, is_noise)`` rows in time order."""
        rng = np.random.default_rng()
        rng.bit_generator.state = self._rng_state
        times = [k * self.time_step for k in range(self.horizon)]
        regular = self.num_entities * self.num_predicates * self.horizon
        n_noise = round(regular * self.noise / (1 - self.noise))
        noise_times = np.sort(rng.integers(0, self.horizon, size=n_noise)) * self.time_step
        noise_s = rng.integers(0, self.num_entities, size=n_noise)
        noise_p = rng.integers(0, self.num_predicates, size=n_noise)
        noise_o = rng.integers(0, self.num_entities, size=n_noise)
        rows = []
        j = 0
        for t in times:
            for s in range(self.num_entities):
                for p in range(self.num_predicates):
                    rows.append((s, p, self.object_at(s, p, t), t, False))
            while j < n_noise and noise_times[j] == t:
                rows.append((int(noise_s[j]), int(noise_p[j]), int(noise_o[j]), t, True))
                j += 1
        return rows

    def to_tsv(self):
        lines = [
            f"e{s}\tr{p}\te{o}\t{t}\t{'noise' if noisy else 'regular'}\n"
            for s, p, o, t, noisy in self.events()
        ]
        return "".join(lines)

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_tsv())
