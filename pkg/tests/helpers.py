import numpy as np

from tkan.clips import ClipRecord


def make_feature_records(num_subjects=3, clips=4, steps=4, width=8, seed=0, first_subject=1):
    rng = np.random.default_rng(seed)
    plan = [("NM", 1), ("NM", 2), ("NM", 3), ("NM", 4), ("NM", 5), ("BG", 1), ("CL", 1), ("NM", 6)]
    records = []
    for subject in range(first_subject, first_subject + num_subjects):
        centre = rng.normal(size=width)
        for index in range(clips):
            condition, seq = plan[index % len(plan)]
            features = centre + 0.1 * rng.normal(size=(steps, width))
            records.append(
                ClipRecord(
                    subject=subject,
                    condition=condition,
                    seq=seq,
                    view=("072", "090", "108")[index % 3],
                    features=features,
                )
            )
    return records
