"""scikit-learn compatible wrappers around the pipeline stages.

``TreemapImager`` turns an expression table into treemap images,
``OmicsMapNetClassifier`` trains the convolutional network on them and
``L2LogisticRegressionCV`` is the linear baseline.  All of them follow the
usual estimator contract (``get_params``/``set_params``, ``fit`` returning
``self``, fitted attributes with a trailing underscore) so they can be
cloned, cross-validated and chained in a ``Pipeline``.
"""

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import cnn
from ._io import sub_seed
from ._validation import check_expression, check_images, encode_labels
from .evaluation import _to_pm1, fit_logistic, select_C, stratified_holdout
from .hierarchy import attach_genes
from .render import downsample_mean, leaf_index_map, paint, scale_unit
from .treemap import build_layout


class TreemapImager(TransformerMixin, BaseEstimator):
    """Render samples x genes expression tables as fixed-geometry treemaps.

    Parameters
    ----------
    tree : HierarchyNode
        Annotation tree whose gene leaves are keyed by the table's columns.
    side : int
        Treemap side in pixels (one layout unit per pixel).
    downsample : int
        Block-mean factor applied after rasterization.
    channels : {1, 3}
        1 stores the min-max intensity, 3 the blue-yellow-red colors.
    borders : bool
        Draw 1-px category borders (they read as 0 / dark gray).

    Attributes
    ----------
    layout_ : TreemapLayout
    gene_ids_ : list of str
        Columns seen during ``fit``.
    """

    def __init__(self, tree=None, side=1024, downsample=2, channels=1, borders=False):
        self.tree = tree
        self.side = side
        self.downsample = downsample
        self.channels = channels
        self.borders = borders

    def fit(self, X, y=None, gene_ids=None):
        values, genes = check_expression(X, gene_ids)
        if self.tree is None:
            raise ValueError("TreemapImager needs an annotation tree")
        if self.side % self.downsample:
            raise ValueError(f"downsample {self.downsample} does not divide side {self.side}")
        medians = dict(zip(genes, np.median(values, axis=0)))
        tree = attach_genes(self.tree, set(genes))
        self.layout_ = build_layout(tree, medians, float(self.side))
        self.gene_ids_ = list(genes)
        col = {g: i for i, g in enumerate(genes)}
        self.leaf_columns_ = np.array([col[e.kegg_id] for e in self.layout_.entries], dtype=np.intp)
        self.index_map_ = leaf_index_map(self.layout_, int(self.side), self.borders)
        return self

    @property
    def image_side_(self):
        return int(self.side) // int(self.downsample)

    def transform(self, X, gene_ids=None, chunk=16):
        check_is_fitted(self, "layout_")
        values, genes = check_expression(X, gene_ids)
        if list(genes) != self.gene_ids_:
            col = {g: i for i, g in enumerate(genes)}
            missing = [g for g in self.gene_ids_ if g not in col]
            if missing:
                raise ValueError(f"{len(missing)} genes seen in fit are missing, e.g. {missing[0]!r}")
            values = values[:, [col[g] for g in self.gene_ids_]]
        n = values.shape[0]
        out = np.empty((n, self.image_side_, self.image_side_, self.channels), dtype=np.float64)
        for start in range(0, n, chunk):
            u = scale_unit(values[start:start + chunk][:, self.leaf_columns_])
            img = paint(self.index_map_, u, self.channels)
            out[start:start + chunk] = downsample_mean(img, int(self.downsample))
        return out


class OmicsMapNetClassifier(ClassifierMixin, BaseEstimator):
    """Three-conv / two-dense classifier trained with Adam and early stopping.

    A stratified ``val_fraction`` of the training data is held out to monitor
    validation cross-entropy.  ``dtype`` selects the compute precision.
    """

    def __init__(self, learning_rate=0.001, beta_l2=0.01, keep_prob=0.75, batch_size=29,
                 max_epochs=300, patience=10, val_fraction=0.1, dtype="float64",
                 random_state=0, verbose=False):
        self.learning_rate = learning_rate
        self.beta_l2 = beta_l2
        self.keep_prob = keep_prob
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.dtype = dtype
        self.random_state = random_state
        self.verbose = verbose

    def _config(self):
        return cnn.TrainConfig(lr=self.learning_rate, beta_l2=self.beta_l2, keep_prob=self.keep_prob,
                               batch_size=self.batch_size, max_epochs=self.max_epochs,
                               patience=self.patience, seed=sub_seed(self.random_state, "train"))

    def fit(self, X, y):
        X = check_images(X)
        self.classes_, y_idx = encode_labels(y)
        if len(X) != len(y_idx):
            raise ValueError(f"{len(X)} images but {len(y_idx)} labels")
        fit_idx, val_idx = cnn_split(y_idx, self.val_fraction, sub_seed(self.random_state, "val"))
        dtype = np.dtype(self.dtype)
        init = cnn.init_model(X.shape[1], X.shape[3], len(self.classes_),
                              seed=sub_seed(self.random_state, "init"), dtype=dtype)
        log = print if self.verbose else None
        X = X.astype(dtype, copy=False)
        self.model_, self.history_, self.optimizer_state_ = cnn.train(
            init, (X[fit_idx], y_idx[fit_idx]), (X[val_idx], y_idx[val_idx]), self._config(), log)
        self.n_epochs_ = len(self.history_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return cnn.predict(self.model_, check_images(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def pool3_maps(self, X):
        check_is_fitted(self, "model_")
        return cnn.pool3_maps(self.model_, check_images(X))


def cnn_split(y_idx, val_fraction, seed):
    """Training / early-stopping split; no hold-out reuses the training set."""
    if val_fraction <= 0:
        idx = np.arange(len(y_idx))
        return idx, idx
    return stratified_holdout(y_idx, val_fraction, seed)


class L2LogisticRegressionCV(ClassifierMixin, BaseEstimator):
    """Binary L2 logistic regression with C chosen by internal CV AUC.

    Minimizes ``C * sum log(1 + exp(-y (x.w + c))) + w.w / 2`` by gradient
    descent with backtracking.
    """

    def __init__(self, Cs=(0.001, 0.01, 0.1, 1.0, 10.0), cv=10, tol=1e-6, max_iter=200_000,
                 random_state=0):
        self.Cs = Cs
        self.cv = cv
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        ypm, self.classes_ = _to_pm1(y)
        self.C_, self.cv_auc_ = select_C(X, y, self.Cs, self.cv, self.random_state)
        w, c = fit_logistic(X, ypm, self.C_, self.tol, self.max_iter)
        self.coef_, self.intercept_ = w, float(c)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return np.asarray(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]
