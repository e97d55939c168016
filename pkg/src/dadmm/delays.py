"""Bernoulli-arrival communication delay model with latest-message buffers.

Each ADMM iteration has two rounds per directed agent pair: local-to-global
(LG) and global-to-local (GL). A message either arrives (age resets to 0) or
fails with probability p_delay (age grows). Ages are hard-capped at d_max by
forcing delivery, and self-communication never delays. Receivers always use
the most recently delivered payload.
"""

from dataclasses import dataclass

import numpy as np

LG = "lg"
GL = "gl"


@dataclass
class DelayConfig:
    p_delay: float
    d_max: int
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_delay <= 1.0:
            raise ValueError("p_delay must be in [0, 1]")
        if self.d_max < 0:
            raise ValueError("d_max must be nonnegative")


@dataclass
class DelayState:
    """Current message age per directed pair, one matrix per round.

    age_lg[i, j] is the age of viewer i's local estimates as held by owner
    j; age_gl[j, i] the age of owner j's consensus as held by viewer i.
    """

    age_lg: np.ndarray
    age_gl: np.ndarray

    @classmethod
    def fresh(cls, n_agents):
        return cls(np.zeros((n_agents, n_agents), dtype=np.int64),
                   np.zeros((n_agents, n_agents), dtype=np.int64))


def sample_delays(state: DelayState, config: DelayConfig, rng) -> DelayState:
    """One iteration of the age process for every directed pair.

    Draws are taken in pair-index order, LG round first, so traces are
    reproducible for a given rng state. Incrementing past d_max forces
    delivery instead.
    """
    new = DelayState(state.age_lg.copy(), state.age_gl.copy())
    for ages in (new.age_lg, new.age_gl):
        n = ages.shape[0]
        fail = rng.random((n, n)) < config.p_delay
        ages[:] = np.where(fail, ages + 1, 0)
        ages[ages > config.d_max] = 0
        np.fill_diagonal(ages, 0)
    return new


class StaleBuffer:
    """Latest delivered payload per (pair, round), with production stamps."""

    def __init__(self):
        self._slots = {}

    def copy(self):
        b = StaleBuffer()
        b._slots = dict(self._slots)
        return b


def channel_send(buffer: StaleBuffer, pair, round_, payload, produced_at):
    key = (round_, pair)
    old = buffer._slots.get(key)
    if old is not None and produced_at < old[1]:
        raise ValueError(
            f"out-of-order send on {key}: {produced_at} after {old[1]}")
    buffer._slots[key] = (payload, produced_at)


def channel_fetch(buffer: StaleBuffer, pair, round_, now):
    key = (round_, pair)
    if key not in buffer._slots:
        raise KeyError(f"fetch from unprimed slot {key}")
    payload, produced_at = buffer._slots[key]
    return payload, now - produced_at
