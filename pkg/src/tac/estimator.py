"""scikit-learn classifier wrapping the full binarize -> prune -> quantize pipeline."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import train
from .analyzer import DEFAULT_BITS, DEFAULT_SCHEDULE, ModelGraph, apply_preset, compare
from .nn import softmax
from .zoo import get_graph


class TACClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier with binarized convolutions and pruned, quantized FC layers.

    Parameters
    ----------
    graph : str or ModelGraph, default="digits-small"
        Layer graph (zoo name or object). Its policies are replaced by the
        ``binary-conv`` preset before training; the last FC layer is resized to
        the number of classes seen in ``fit``.
    stages : {"train", "prune", "all"}, default="all"
        How far to run the pipeline.
    scaled : bool, default=True
        Per-channel scaling of binary conv weights (XNOR-net style); False
        gives plain sign weights (BNN style).
    epochs, learning_rate, batch_size, weight_decay : training options.
    prune_schedule : sequence of float, default=(0.2, 0.4, 0.6, 0.7, 0.75)
    quant_bits : int, default=4
    finetune_epochs : int, default=10
        Epochs of fine-tuning after each pruning step and after quantization.
    fine_tune_lr : float, default=1e-4
    seed : int, default=0

    Attributes
    ----------
    state_ : TrainState
        Final network state.
    stage_states_ : dict
        State after each completed stage.
    classes_ : ndarray
    """

    def __init__(self, graph="digits-small", stages="all", scaled=True, epochs=30,
                 learning_rate=1e-3, batch_size=64, weight_decay=1e-5,
                 prune_schedule=DEFAULT_SCHEDULE, quant_bits=DEFAULT_BITS,
                 finetune_epochs=10, fine_tune_lr=1e-4, seed=0):
        self.graph = graph
        self.stages = stages
        self.scaled = scaled
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.prune_schedule = prune_schedule
        self.quant_bits = quant_bits
        self.finetune_epochs = finetune_epochs
        self.fine_tune_lr = fine_tune_lr
        self.seed = seed

    def _config(self) -> train.TrainConfig:
        return train.TrainConfig(
            learning_rate=self.learning_rate, fine_tune_lr=self.fine_tune_lr,
            weight_decay=self.weight_decay, batch_size=self.batch_size, epochs=self.epochs,
            prune_schedule=tuple(self.prune_schedule), quant_bits=self.quant_bits,
            finetune_epochs=self.finetune_epochs, seed=self.seed,
        )

    def _graph(self, n_classes: int) -> ModelGraph:
        g = get_graph(self.graph) if isinstance(self.graph, str) else self.graph
        last = g.layers[-1]
        if last.out_features != n_classes:
            g = replace(g, layers=g.layers[:-1] + (replace(last, out_features=n_classes),))
        return apply_preset(g, "binary-conv" if self.scaled else "binary-conv-bnn")

    def _images(self, X, shape):
        X = check_array(X, allow_nd=True)
        if X.ndim == 2:
            if X.shape[1] != np.prod(shape):
                raise ValueError(f"expected {np.prod(shape)} features, got {X.shape[1]}")
            X = X.reshape((-1,) + tuple(shape))
        if X.shape[1:] != tuple(shape):
            raise ValueError(f"expected images of shape {shape}, got {X.shape[1:]}")
        return X

    def fit(self, X, y):
        if self.stages not in ("train", "prune", "all"):
            raise ValueError(f"stages must be 'train', 'prune' or 'all', got {self.stages!r}")
        X, y = check_X_y(X, y, allow_nd=True)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        g = self._graph(len(self.classes_))
        X = self._images(X, g.input_shape)
        self.n_features_in_ = int(np.prod(g.input_shape))
        yi = self._encoder.transform(y)
        cfg = self._config()
        data = (X, yi)
        states = {"trained": train.train_binary_net(g, data, cfg)}
        state = states["trained"]
        if self.stages in ("prune", "all"):
            state = states["pruned"] = train.iterative_prune_finetune(state, cfg.prune_schedule, cfg, data)
        if self.stages == "all":
            state = states["quantized"] = train.quantize_finetune(state, cfg.quant_bits, cfg, data)
        self.stage_states_ = states
        self.state_ = state
        return self

    def decision_function(self, X, engine="dense"):
        check_is_fitted(self, "state_")
        X = self._images(X, self.state_.graph.input_shape)
        return train.predict_logits(self.state_, X, engine)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X, engine="dense"):
        return self.classes_[self.decision_function(X, engine).argmax(axis=1)]

    def compression_report(self, index_bits=0):
        """Analyzer report of the fitted network against its full-precision version."""
        check_is_fitted(self, "state_")
        g = self.state_.graph
        return compare(apply_preset(g, "full"), g, index_bits=index_bits)
