"""Shared test utilities: trajectory builders and a label brute-forcer."""
import numpy as np

from apil_lab.query import (ASK_CONTINUE, ASK_QUERY, ApilConfig, StepRecord,
                            Trajectory)


def make_trajectory(T, queried, distances):
    """Trajectory of T dummy steps; ask = query exactly at ``queried`` indices."""
    queried = set(queried)
    steps = [StepRecord(features=np.zeros(2), exe_action=0,
                        ask_action=ASK_QUERY if t in queried else ASK_CONTINUE,
                        mean_policy=np.array([0.5, 0.5]), remaining=T - t)
             for t in range(T)]
    return Trajectory(steps, {int(k): float(v) for k, v in distances.items()})


def brute_force_labels(T, queried, distances, cfg: ApilConfig):
    """Direct evaluation of the progress conditions, without the backward sweep.

    A step t is progressable when the final distance is within epsilon, or some
    queried step i >= t has a gap at least sigma times the gap of a later
    observed step j (observed = queried steps plus the final step).
    """
    observed = sorted(distances)
    gaps = {t: distances[t] - cfg.teacher_final_distance for t in distances}
    labels = []
    for t in range(T):
        ok = distances[T] <= cfg.epsilon
        if not ok:
            for i in queried:
                if i < t:
                    continue
                for j in observed:
                    if j > i and gaps[i] >= cfg.sigma * gaps[j]:
                        ok = True
        labels.append(ASK_CONTINUE if ok else ASK_QUERY)
    return labels
