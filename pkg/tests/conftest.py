from datetime import datetime, timedelta

import numpy as np
import pytest

from ter_tsf.core import Sample, TextRecord

T0 = datetime(2020, 1, 1)


def day(i):
    return T0 + timedelta(days=i)


def make_sample(lookback, horizon, texts=(), split="train", sample_id="s"):
    L = len(lookback)
    return Sample(
        lookback=lookback,
        horizon_truth=horizon,
        lookback_span=(day(0), day(L - 1)),
        horizon_span=(day(L), day(L + len(horizon) - 1)),
        texts=tuple(TextRecord(day(0), day(L - 1), t) for t in texts),
        split=split,
        sample_id=sample_id,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
