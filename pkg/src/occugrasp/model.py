"""The full learnable model assembled from a RunConfig.

Each submodule draws its init from its own seed stream so toggling one
ablation flag does not shift the initialization of unrelated modules.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .geometry import default_endpoints, grasp_direction_set, slerp_frames
from .grasp import SetAbstraction
from .nn import (
    MLP,
    PlaneEncoder,
    flatten_params,
    set_flat_params,
)
from .occupancy import GraspRegionSpec
from .pointcloud import rng_from
from .triplane import PointEncoder

_ARCH_KEYS = (
    "k_groups",
    "plane_h",
    "plane_w",
    "c_p",
    "c_t",
    "c_q",
    "v_dirs",
    "key_k",
    "sa_widths",
    "use_occupancy",
    "use_density",
    "use_local_context",
    "use_global_context",
    "use_refinement",
    "implicit_mode",
)


class GraspOccModel:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.frames = slerp_frames(*default_endpoints(), cfg.k_groups)
        self.directions = grasp_direction_set(cfg.v_dirs)
        self.region_spec = GraspRegionSpec(
            r=cfg.gripper_radius,
            d_min=cfg.d_min,
            d_max=cfg.d_max,
            v=cfg.voxel_size,
            budget=cfg.region_budget,
        )
        self.norm_pad = cfg.gripper_radius + cfg.d_max + cfg.voxel_size

        def rng(i):
            return rng_from(cfg.seed, 0xD0, i)

        self.point_encoder = PointEncoder(cfg.c_p, rng(0))
        plane_in = cfg.c_p + (1 if cfg.use_density else 0)
        self.plane_encoders = [PlaneEncoder(plane_in, cfg.c_t, rng(1 + i)) for i in range(3)]
        self.e1 = self.e2 = None
        if cfg.use_global_context:
            self.e1 = MLP([3 * cfg.c_t, 2 * cfg.c_t, cfg.c_t], rng(4))
            self.e2 = MLP([cfg.k_groups * cfg.c_t, 2 * cfg.f_g_width, cfg.f_g_width], rng(5))
        self.pe = None
        if cfg.use_local_context:
            self.pe = MLP([9, cfg.pe_width, cfg.pe_width], rng(6))
        self.occ_decoder = None
        if cfg.use_occupancy:
            self.occ_decoder = MLP([cfg.f_pq_width, max(cfg.f_pq_width // 2, 8), 1], rng(7))
        self.afford_head = MLP([cfg.c_p, cfg.c_p, 1], rng(8))
        self.view_head = MLP([cfg.c_p, cfg.c_p, cfg.v_dirs], rng(9))
        self.sa = SetAbstraction(cfg.sa_widths, rng(10))
        self.implicit_width = 0
        if cfg.implicit_mode != "none":
            self.implicit_width = cfg.f_pq_width if cfg.use_occupancy else cfg.c_p
        self.implicit_sa = None
        if cfg.implicit_mode == "set_abstraction":
            self.implicit_sa = SetAbstraction(
                (self.implicit_width, self.implicit_width),
                rng(11),
                ks=(8, 1),
                radii=(0.04, np.inf),
                c_feat_in=self.implicit_width,
            )
        self.shape_dim = self.sa.out_width + self.implicit_width
        self.refine_view_head = None
        if cfg.use_refinement:
            self.refine_view_head = MLP([self.shape_dim, self.shape_dim, cfg.v_dirs], rng(12))
        self.pose_head = MLP([self.shape_dim, self.shape_dim, 96], rng(13))

    @property
    def feature_mode(self) -> str:
        if self.cfg.use_global_context and self.cfg.use_local_context:
            return "fused"
        return "global" if self.cfg.use_global_context else "local"

    def modules(self):
        mods = [self.point_encoder, *self.plane_encoders]
        for m in (self.e1, self.e2, self.pe, self.occ_decoder):
            if m is not None:
                mods.append(m)
        mods += [self.afford_head, self.view_head, self.sa]
        if self.implicit_sa is not None:
            mods.append(self.implicit_sa)
        if self.refine_view_head is not None:
            mods.append(self.refine_view_head)
        mods.append(self.pose_head)
        return mods

    def params(self):
        return [p for m in self.modules() for p in m.params()]

    @property
    def n_params(self) -> int:
        return int(flatten_params(self.params()).size)

    def descriptor(self) -> dict:
        d = {k: getattr(self.cfg, k) for k in _ARCH_KEYS}
        d["sa_widths"] = list(self.cfg.sa_widths)
        d["n_params"] = self.n_params
        return d

    def load_flat(self, vec: np.ndarray):
        set_flat_params(self.params(), vec)

    def check_descriptor(self, desc: dict):
        mine = self.descriptor()
        if mine != desc:
            diff = {k: (desc.get(k), mine.get(k)) for k in set(desc) | set(mine) if desc.get(k) != mine.get(k)}
            raise ValueError(f"checkpoint architecture mismatch: {diff}")
