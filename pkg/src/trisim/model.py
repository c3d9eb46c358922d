"""The full Siamese head: AFE -> SA/FA -> fusion -> classifier."""
from __future__ import annotations

import numpy as np

from .afe import AdaptiveFeatureExtraction
from .attention import InformationInteractor, SaMaps
from .config import d_prime, validate
from .encoder import BlockSelection, select_blocks
from .fusion import LABEL_SETS, ClassifierHead, ReceptiveFieldModule, pooling_fusion, rfm_pair_vector
from .tensor import ParamSet, Tensor, no_grad, softmax


class SiameseHead:
    """All trainable parts of the network for one run configuration.

    Both sentences go through the same modules; only the data differs.
    """

    def __init__(self, cfg: dict, dtype=np.float32, seed: int | None = None):
        self.cfg = validate(cfg)
        self.dtype = np.dtype(dtype)
        enc, blocks, att, fus = cfg["encoder"], cfg["blocks"], cfg["attention"], cfg["fusion"]
        strategy = blocks["strategy"]
        self.selection = BlockSelection(strategy if isinstance(strategy, str) else tuple(strategy))
        n_blocks = len(self.selection.indices(enc["H"]))
        D, dp = enc["D"], d_prime(cfg)
        rng = np.random.default_rng(cfg["train"]["seed"] if seed is None else seed)

        self.params = ParamSet()
        self.afe = AdaptiveFeatureExtraction(self.params, n_blocks, D, blocks.get("reduction"),
                                             blocks["adaptive"], rng, self.dtype)
        self.interactor = InformationInteractor(
            self.params, D, dp, sa=att["sa"], fa=att["fa"], scale_scores=att["scale_scores"],
            tied=att.get("tied", True), reduction=att.get("reduction"), rng=rng, dtype=self.dtype)
        if fus["mode"] == "rfm":
            self.rfm = ReceptiveFieldModule(self.params, dp, fus["d_dprime"], fus["psi_sizes"],
                                            fus["phi_size"], fus["dilations"], rng, self.dtype)
            head_in = 3 * self.rfm.out_features
        else:
            self.rfm = None
            head_in = 6 * dp
        self.labels = LABEL_SETS[cfg["head"]["labels"]]
        self.head = ClassifierHead(self.params, head_in, cfg["head"]["hidden"], len(self.labels),
                                   rng, self.dtype)

    def _prepare(self, stacks) -> Tensor:
        if isinstance(stacks, Tensor):
            idx = self.selection.indices(stacks.shape[-3])
            if idx == list(range(stacks.shape[-3])):
                return stacks
            return stacks[..., idx, :, :]
        arr = select_blocks(np.asarray(stacks), self.selection)
        return Tensor(arr.astype(self.dtype, copy=False))

    def pair_vector(self, xs, ys) -> Tensor:
        X = self.afe(self._prepare(xs))
        Y = self.afe(self._prepare(ys))
        Xp, Yp = self.interactor(X, Y)
        if self.rfm is None:
            return pooling_fusion(Xp, Yp)
        return rfm_pair_vector(self.rfm(Xp), self.rfm(Yp))

    def logits(self, xs, ys) -> Tensor:
        """Logits for a batch of block stacks ``(B, H, L, D)`` (or a single pair)."""
        return self.head.logits(self.pair_vector(xs, ys))

    def predict_proba(self, xs, ys) -> np.ndarray:
        with no_grad():
            return softmax(self.logits(xs, ys), axis=-1).data

    def similarity_maps(self, x, y) -> SaMaps:
        """Spatial-attention score and weight maps for one pair."""
        if not self.interactor.use_sa:
            raise ValueError("configuration has spatial attention disabled")
        with no_grad():
            X = self.afe(self._prepare(x))
            Y = self.afe(self._prepare(y))
            _, _, maps = self.interactor(X, Y, return_maps=True)
        return maps

    def expected_input(self) -> tuple[int, int, int]:
        enc = self.cfg["encoder"]
        return enc["H"], enc["L"], enc["D"]
