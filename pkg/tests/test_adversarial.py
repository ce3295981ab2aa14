from collections import Counter

import numpy as np
import pandas as pd
import pytest
import torch

from fairmsm.adversarial import (
    NetConfig, TrainConfig, adversarial_fit, adversarial_fit_divided, gradient_check, prepare_data,
    probe_accuracy, total_loss_gradient,
)
from fairmsm.core import two_state_spec
from fairmsm.errors import ValidationError
from fairmsm.pipeline import build_exposure, rows_to_frame
from fairmsm.synthetic import default_scenario, generate_population, generate_study

SHORT = TrainConfig(epochs=3, batch_size=256, patience=None)


@pytest.fixture(scope="module")
def study():
    sc = default_scenario(n=400, seed=2, level_probs=(1 / 3, 1 / 3, 1 / 3), proxy_shift=1.0)
    pop = generate_population(sc)
    frame = rows_to_frame(build_exposure(generate_study(sc, pop), sc.transition_spec, pop))
    return sc, pop, frame


def test_gradient_matches_finite_differences(study):
    sc, pop, frame = study
    model = adversarial_fit(frame, pop, sc.transition_spec, 1.5, ["z1", "z2"], ["smoker"], train_config=SHORT)
    data, _, _ = prepare_data(frame, pop, ["z1", "z2"], ["smoker"], [1, 2, 3, 4])
    assert gradient_check(model, data, n_params=150) < 1e-5
    assert gradient_check(model, data, eps=1e-5, n_params=150, stencil=3) < 1e-4
    with pytest.raises(ValidationError):
        gradient_check(model, data, eps=1e-2)
    with pytest.raises(ValidationError):
        gradient_check(model, data, stencil=4)


def test_gradient_is_affine_in_alpha(study):
    sc, pop, frame = study
    model = adversarial_fit(frame, pop, sc.transition_spec, 0.0, ["z1", "z2"], train_config=SHORT)
    data, _, _ = prepare_data(frame, pop, ["z1", "z2"], (), [1, 2, 3, 4])
    g0, g1, g3 = (total_loss_gradient(model, data, a) for a in (0.0, 1.0, 3.0))
    torch.testing.assert_close(g3 - g0, 3 * (g1 - g0), rtol=0, atol=1e-12)
    assert float(torch.max(torch.abs(g1 - g0))) > 0


def test_divided_with_one_transition_equals_shared(study):
    sc, pop, frame = study
    spec = two_state_spec()
    deaths = frame[frame["transition"] == 3].assign(transition=1)
    shared = adversarial_fit(deaths, pop, spec, 1.0, ["z1"], train_config=SHORT, seed=4)
    divided = adversarial_fit_divided(deaths, pop, spec, 1.0, ["z1"], train_config=SHORT, seed=4)
    cov = pd.DataFrame({"z1": [-1.0, 0.0, 2.0]})
    np.testing.assert_array_equal(shared.log_rates(cov, [60, 70, 80]), divided.log_rates(cov, [60, 70, 80]))


def test_independent_features_give_chance_accuracy():
    sc = default_scenario(n=1500, seed=3, level_probs=(1 / 3, 1 / 3, 1 / 3), proxy_shift=0.0, direct_effect=0.0,
                          smoker=False)
    pop = generate_population(sc)
    frame = rows_to_frame(build_exposure(generate_study(sc, pop), sc.transition_spec, pop))
    model = adversarial_fit(frame, pop, sc.transition_spec, 0.0, ["z1", "z2"],
                            train_config=TrainConfig(epochs=10, batch_size=512, patience=None))
    chance = max(Counter(p.sensitive for p in pop).values()) / len(pop)
    assert abs(model.adversary_accuracy(pop) - chance) < 0.05
    assert probe_accuracy(model, pop, steps=200) < chance + 0.05


def test_same_seed_same_fit_and_label_free_prediction(study):
    sc, pop, frame = study
    a = adversarial_fit(frame, pop, sc.transition_spec, 1.0, ["z1"], train_config=SHORT, seed=7)
    b = adversarial_fit(frame, pop, sc.transition_spec, 1.0, ["z1"], train_config=SHORT, seed=7)
    cov = pd.DataFrame({"z1": [0.3, 0.9]})
    np.testing.assert_array_equal(a.log_rates(cov, [65, 75]), b.log_rates(cov, [65, 75]))
    np.testing.assert_array_equal(a.log_rates(cov, [65, 75], ["A", "A"]), a.log_rates(cov, [65, 75], ["B", "C"]))
    log = a.log_frame()
    assert list(log["epoch"]) == [1, 2, 3]
    assert np.allclose(log["loss"], log["loss_pred"] - 1.0 * log["loss_adv"])


def test_early_stopping_and_validation(study):
    sc, pop, frame = study
    model = adversarial_fit(frame, pop, sc.transition_spec, 0.0, ["z1"],
                            train_config=TrainConfig(epochs=500, batch_size=1024, patience=2, lr_model=0.05))
    assert len(model.log) < 500
    assert model.log_frame()["val_loss"].notna().all()
    with pytest.raises(ValidationError):
        adversarial_fit(frame, pop, sc.transition_spec, -1.0, ["z1"], train_config=SHORT)
    with pytest.raises(ValidationError):
        adversarial_fit(frame, pop, sc.transition_spec, 1.0, ["z1"],
                        train_config=TrainConfig(epochs=1, schedule="step"))


def test_representation_width(study):
    sc, pop, frame = study
    model = adversarial_fit(frame, pop, sc.transition_spec, 0.0, ["z1", "z2"], net_config=NetConfig(representation=3),
                            train_config=SHORT)
    assert model.representation(pd.DataFrame({"z1": [0.0], "z2": [1.0]})).shape == (1, 3)
