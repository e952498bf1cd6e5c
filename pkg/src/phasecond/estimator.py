"""scikit-learn style wrapper: fit on synthetic samples, predict latents, score by H@S."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .experiments import evaluate_latents, generate, train_single_stage, train_two_stage
from .model import ModelConfig
from .sampling import SampleConfig
from .synthworld import ActionSchema, default_vocabulary
from .training import TrainConfig, encode_samples


class PhaseConditionedGenerator(BaseEstimator):
    """Conditional latent-video generator.

    ``X`` is a sequence of ``SyntheticSample``; ``fit`` trains on their latents,
    prompts and audio, ``predict`` samples new latents for their conditions.
    """

    def __init__(
        self,
        L=6,
        D=64,
        N=16,
        F=16,
        heads=4,
        gamma=1.5,
        k_max=8,
        vocab=128,
        phase_embeddings=True,
        audio_schedule="progressive",
        two_stage=True,
        steps=2000,
        batch=8,
        lr=1e-3,
        sample_steps=40,
        cfg_text=5.0,
        cfg_audio=5.0,
        theta_hit=0.5,
        n_actions=16,
        random_state=0,
    ):
        self.L = L
        self.D = D
        self.N = N
        self.F = F
        self.heads = heads
        self.gamma = gamma
        self.k_max = k_max
        self.vocab = vocab
        self.phase_embeddings = phase_embeddings
        self.audio_schedule = audio_schedule
        self.two_stage = two_stage
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.sample_steps = sample_steps
        self.cfg_text = cfg_text
        self.cfg_audio = cfg_audio
        self.theta_hit = theta_hit
        self.n_actions = n_actions
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            L=self.L, D=self.D, N=self.N, F=self.F, heads=self.heads, gamma=self.gamma, k_max=self.k_max,
            vocab=self.vocab, phase_embeddings=self.phase_embeddings, audio_schedule=self.audio_schedule,
        )

    def fit(self, X, y=None):
        if len(X) == 0:
            raise ValueError("cannot fit on an empty sample list")
        mc = self._model_config()
        vocab = default_vocabulary()
        enc = encode_samples(X, vocab, mc)
        tcfg = TrainConfig(steps=self.steps, batch=self.batch, lr=self.lr, seed=self.random_state)
        if self.two_stage:
            params, _ = train_two_stage(mc, enc, tcfg, init_seed=self.random_state)
        else:
            params = train_single_stage(mc, enc, tcfg, init_seed=self.random_state)
        self.model_config_ = mc
        self.params_ = params
        self.vocabulary_ = vocab
        self.schema_ = ActionSchema.build(self.D, n_actions=self.n_actions)
        return self

    def predict(self, X) -> np.ndarray:
        """Latents (n, F, N, D), one per conditioning sample."""
        check_is_fitted(self, "params_")
        scfg = SampleConfig(steps=self.sample_steps, cfg_text=self.cfg_text, cfg_audio=self.cfg_audio, seed=self.random_state)
        return generate(self.model_config_, self.params_, X, self.vocabulary_, scfg)

    def score(self, X, y=None) -> float:
        """Mean Hit@Segment of predicted latents against each sample's own prompt."""
        return evaluate_latents(self.predict(X), X, self.schema_, self.theta_hit).h_at_s
