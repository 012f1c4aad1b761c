from datetime import date

import numpy as np
import pytest

from loadsynth.services.profile_store import LabelVector
from loadsynth.services.simdata import (
    SMART_CHARGE_BLOCK,
    STANDARD_CHARGE_BLOCK,
    CohortSpec,
    default_label_mix,
    generate_cohort,
    generate_household,
    structural_profile,
)

WEEKDAY = date(2021, 3, 3)
MIDDAY = slice(19, 30)


def _indices(periods):
    return {p - 1 for p in periods}


def test_cohort_is_deterministic():
    spec = CohortSpec(n_households=30, days_per_household=3, seed=4)
    first, second = generate_cohort(spec), generate_cohort(spec)
    np.testing.assert_array_equal(first.readings, second.readings)
    assert first.labels == second.labels
    other = generate_cohort(CohortSpec(n_households=30, days_per_household=3, seed=5))
    assert not np.array_equal(first.readings, other.readings)


def test_cohort_follows_label_mix():
    dataset = generate_cohort(CohortSpec(n_households=100, days_per_household=2, seed=0))
    assert len(dataset) == 200
    assert dataset.n_households == 100
    expected = {label: round(share * 100) for label, share in default_label_mix().items()}
    assert dataset.label_counts == expected
    assert np.all(dataset.readings >= 0)


def test_spec_rejects_bad_mix():
    with pytest.raises(ValueError):
        CohortSpec(label_mix={LabelVector(0, 0, 0, "flat", "c"): 0.5})
    with pytest.raises(ValueError):
        CohortSpec(noise_scale=-0.1)


def test_structural_peaks_at_morning_and_evening():
    label = LabelVector(False, False, False, "terraced", "d")
    profile = structural_profile(label, WEEKDAY)
    assert int(np.argmax(profile[:24])) == 15
    assert int(np.argmax(profile[24:])) + 24 == 37
    assert np.all(np.delete(profile[:24], 15) < profile[15])


def test_heat_pump_only_lifts_cold_season():
    heat_pump = LabelVector(False, True, False, "detached", "e")
    plain = LabelVector(False, False, False, "detached", "e")
    winter, summer = date(2021, 1, 13), date(2021, 7, 14)
    assert np.all(structural_profile(heat_pump, winter) >= structural_profile(plain, winter))
    assert structural_profile(heat_pump, winter).max() > structural_profile(plain, winter).max()
    np.testing.assert_array_equal(structural_profile(heat_pump, summer), structural_profile(plain, summer))


@pytest.mark.parametrize("tariff, block", [(True, SMART_CHARGE_BLOCK), (False, STANDARD_CHARGE_BLOCK)])
def test_ev_charging_fills_the_tariff_block(tariff, block):
    label = LabelVector(True, False, tariff, "semi_detached", "c")
    spec = CohortSpec(n_households=1, days_per_household=40, noise_scale=0.0, seed=2)
    charged_days = 0
    for profile, _ in generate_household(0, label, spec):
        extra = profile.readings - structural_profile(label, profile.date)
        active = set(np.flatnonzero(extra > 1e-12))
        if active:
            charged_days += 1
            assert active == _indices(block)
            rate = extra[block[0] - 1]
            assert 3.0 <= rate <= 7.0
            np.testing.assert_allclose(extra[[p - 1 for p in block]], rate)
    assert 0 < charged_days < 40


def test_charging_share_clears_the_upper_tail():
    """Every charging period has well over 5% of the cohort's profiles charging."""
    dataset = generate_cohort(CohortSpec(n_households=200, days_per_household=30, noise_scale=0.0, seed=6))
    charging = dataset.readings > 2.0
    for period in set(SMART_CHARGE_BLOCK) | set(STANDARD_CHARGE_BLOCK):
        assert charging[:, period - 1].mean() > 0.09
    assert not charging[:, 8:44].any()


def test_midday_gap_is_zero_without_noise():
    """EV ownership alone never changes daytime load in the noise-free simulator."""
    ev = LabelVector(True, False, False, "semi_detached", "d")
    no_ev = LabelVector(False, False, False, "semi_detached", "d")
    spec = CohortSpec(n_households=2, days_per_household=10, noise_scale=0.0, seed=1)
    for (with_ev, _), (without, _) in zip(generate_household(0, ev, spec), generate_household(1, no_ev, spec)):
        np.testing.assert_array_equal(with_ev.readings[MIDDAY], without.readings[MIDDAY])
