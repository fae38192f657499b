"""
Desk-scale experiments on the standard synthetic scene: 24x24 grid, 48 hourly steps,
20 features of which 3 drive the truth, 40 clustered sensors.
Slow (several minutes per seed); run separately from the unit tests:
    python3 -m unittest discover src/tests -p "acceptance_*.py" -v

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
import unittest
from typing import Dict, List

import numpy as np

from src.interfaces import SceneConfig, ModelConfig, TrainConfig, LossWeights, SyntheticScene
from src.grid_data import split_locations, carry_split
from src.network import LatteModel
from src.synthetic import generate_scene
from src.training import train, fine_tune, evaluate, selected_feature_report
from src.baselines import IdwPredictor, KrigingPredictor

SEEDS = [0, 1, 2, 3, 4]


def full_field_rmse(prediction: np.ndarray, scene: SyntheticScene) -> float:
    return evaluate(prediction, scene.truth, np.ones(scene.truth.shape, dtype=bool)).rmse


class Run:
    """ One trained model on one seeded scene """

    def __init__(self, scene: SyntheticScene, seed: int, weights: LossWeights) -> None:
        self.split = split_locations(scene.labels.labeled_cells(), scene.spec, seed)
        self.model = LatteModel(ModelConfig(n_features=scene.features.n_features, seed=seed))
        self.model, self.history = train(self.model, scene, self.split,
                                         TrainConfig(weights=weights, seed=seed))
        self.rmse = full_field_rmse(self.model.predict_grid(scene.features), scene)
        self.selected = [f["name"] for f in selected_feature_report(self.model)]
        self.train_cells = self.split.train

    def copy_model(self) -> LatteModel:
        model = LatteModel(self.model.config)
        model.load_state_dict(self.model.state_dict())
        model.load_scaler_state(self.model.scaler_state())
        return model


class StandardSceneTest(unittest.TestCase):
    scenes: Dict[int, SyntheticScene] = {}
    full: Dict[int, Run] = {}

    @classmethod
    def setUpClass(cls):
        for seed in SEEDS:
            cls.scenes[seed] = generate_scene(SceneConfig(seed=seed))
            cls.full[seed] = Run(cls.scenes[seed], seed, LossWeights())

    def _ablated(self, weights: LossWeights) -> List[float]:
        return [Run(self.scenes[seed], seed, weights).rmse for seed in SEEDS]

    def test_model_beats_interpolation(self):
        wins = 0
        for seed in SEEDS:
            scene, run = self.scenes[seed], self.full[seed]
            times = range(scene.time_steps)
            idw = full_field_rmse(IdwPredictor(scene, run.train_cells).predict_range(times),
                                  scene)
            ok = full_field_rmse(KrigingPredictor(scene, run.train_cells, seed=seed)
                                 .predict_range(times), scene)
            print(f"seed {seed}: model {run.rmse:.4f} idw {idw:.4f} ok {ok:.4f}")
            wins += run.rmse < min(idw, ok)
        self.assertGreaterEqual(wins, 4)

    def test_autocorrelation_ablation(self):
        full = np.array([self.full[seed].rmse for seed in SEEDS])
        ablated = np.array(self._ablated(LossWeights(eta=0.0)))
        print(f"without autocorrelation: {ablated.round(4)} vs {full.round(4)}")
        self.assertGreaterEqual(ablated.mean(), 1.02 * full.mean())
        self.assertLessEqual(int(np.sum(ablated < full)), 1)

    def test_feature_selection_ablation(self):
        full = np.array([self.full[seed].rmse for seed in SEEDS])
        ablated = np.array(self._ablated(LossWeights(alpha=0.0)))
        print(f"without feature selection: {ablated.round(4)} vs {full.round(4)}")
        self.assertGreaterEqual(ablated.mean(), full.mean())

    def test_fine_tune_beats_cold_start(self):
        wins = 0
        for seed in SEEDS:
            run = self.full[seed]
            second = generate_scene(SceneConfig(seed=seed), period=1)
            split = carry_split(run.split, second.labels.labeled_cells(), second.spec, seed)
            cfg = TrainConfig(seed=seed)
            _, tuned = fine_tune(run.copy_model(), second, split, cfg, prior_splits=[run.split])
            cold = LatteModel(ModelConfig(n_features=second.features.n_features, seed=seed))
            _, scratch = train(cold, second, split, cfg)
            print(f"seed {seed}: fine-tuned {tuned.best_val_rmse:.4f} "
                  f"cold start {scratch.best_val_rmse:.4f}")
            wins += tuned.best_val_rmse <= scratch.best_val_rmse
        self.assertGreaterEqual(wins, 3)

    def test_relevant_features_selected(self):
        hits = 0
        for seed in SEEDS:
            scene = self.scenes[seed]
            names = scene.features.feature_names
            relevant = {names[p] for p in scene.relevant_feature_ids}
            selected = set(self.full[seed].selected)
            irrelevant = len(selected - relevant)
            hits += relevant <= selected and irrelevant <= 0.3 * (len(names) - len(relevant))
        self.assertGreaterEqual(hits, 4)


if __name__ == '__main__':
    unittest.main()
