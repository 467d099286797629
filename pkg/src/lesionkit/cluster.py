"""Voxel-to-lesion conversion: 3D connected components, per-grade and
clinically-significant (CS) lesion maps, volume filtering, zone filtering,
and lesion probability scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .grades import CS_BINARY, CS_GRADES, GRADE_ORDER, Grade
from .volume import ProbStack, Volume

MAP_GS = "gs"
MAP_CS = "cs"

MIN_LESION_VOLUME_MM3 = 45.0
DEFAULT_CONNECTIVITY = 26

_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class LesionCluster:
    """One connected lesion: sorted voxel tuple, grade, physical volume,
    and its probability score (mean of the scoring channel)."""

    voxels: tuple[tuple[int, int, int], ...]  # (x, y, z), scan-order sorted
    grade: object  # Grade member, or CS_BINARY for merged CS clusters
    volume_mm3: float
    score: float

    def __post_init__(self):
        if not self.voxels:
            raise ValueError("cluster must contain at least one voxel")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.grade != CS_BINARY and not isinstance(self.grade, Grade):
            raise ValueError(f"grade must be a lesion grade or {CS_BINARY!r}")

    @property
    def n_voxels(self) -> int:
        return len(self.voxels)

    @property
    def voxel_set(self) -> frozenset:
        return frozenset(self.voxels)

    @property
    def bbox(self) -> tuple[int, int, int, int, int, int]:
        """(xmin, ymin, zmin, xmax, ymax, zmax), inclusive."""
        xs, ys, zs = zip(*self.voxels)
        return (min(xs), min(ys), min(zs), max(xs), max(ys), max(zs))

    def index_arrays(self):
        """(zs, ys, xs) integer arrays for numpy fancy indexing."""
        xs, ys, zs = np.asarray(self.voxels, dtype=np.intp).T
        return zs, ys, xs

    @property
    def grade_name(self) -> str:
        return self.grade if self.grade == CS_BINARY else self.grade.display


@dataclass(frozen=True)
class LesionMap:
    """Disjoint lesion clusters extracted from one volume."""

    clusters: tuple[LesionCluster, ...]
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    map_kind: str

    def __post_init__(self):
        if self.map_kind not in (MAP_GS, MAP_CS):
            raise ValueError(f"map_kind must be {MAP_GS!r} or {MAP_CS!r}")
        seen = set()
        for c in self.clusters:
            for v in c.voxels:
                if v in seen:
                    raise ValueError(f"clusters overlap at voxel {v}")
                seen.add(v)
        object.__setattr__(self, "clusters", tuple(self.clusters))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    def __len__(self) -> int:
        return len(self.clusters)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in _CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be one of 6, 18, 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])


def connected_components(v: Volume, connectivity: int = DEFAULT_CONNECTIVITY):
    """Partition the foreground of a binary volume into maximal connected
    sets of (x, y, z) voxels under a 6/18/26 neighborhood."""
    mask = np.asarray(v.values) != 0
    return _components_of_mask(mask, connectivity)


def _components_of_mask(mask: np.ndarray, connectivity: int):
    labeled, n = ndimage.label(mask, structure=_structure(connectivity))
    out = []
    for idx in range(1, n + 1):
        zs, ys, xs = np.nonzero(labeled == idx)
        out.append({(int(x), int(y), int(z)) for x, y, z in zip(xs, ys, zs)})
    return out


def _sorted_voxels(voxels) -> tuple:
    # scan order (z slowest, x fastest) keeps serialization stable
    return tuple(sorted(voxels, key=lambda v: (v[2], v[1], v[0])))


def _mean_over(values: np.ndarray, cluster_voxels) -> float:
    xs, ys, zs = np.asarray(list(cluster_voxels), dtype=np.intp).T
    return float(values[zs, ys, xs].mean(dtype=np.float64))


def _build_map(labels: Volume, probs, connectivity: int, map_kind: str) -> LesionMap:
    voxel_vol = labels.voxel_volume_mm3
    lab = np.asarray(labels.values)
    groups = []
    if map_kind == MAP_GS:
        for grade in GRADE_ORDER:
            groups.append((grade, lab == int(grade)))
    else:
        cs_mask = np.isin(lab, [int(g) for g in CS_GRADES])
        groups.append((CS_BINARY, cs_mask))
    clusters = []
    for grade, mask in groups:
        if map_kind == MAP_CS:
            chans = [int(g) for g in CS_GRADES]
            channel = None if probs is None else probs.data[chans].sum(axis=0, dtype=np.float64)
        else:
            channel = None if probs is None else probs.data[int(grade)]
        for comp in _components_of_mask(mask, connectivity):
            vox = _sorted_voxels(comp)
            score = 1.0 if channel is None else _mean_over(channel, vox)
            clusters.append(
                LesionCluster(
                    voxels=vox,
                    grade=grade,
                    volume_mm3=len(vox) * voxel_vol,
                    score=min(score, 1.0),
                )
            )
    clusters.sort(key=lambda c: (c.voxels[0][2], c.voxels[0][1], c.voxels[0][0]))
    return LesionMap(tuple(clusters), labels.dims, labels.spacing_mm, map_kind)


def gs_lesion_maps(
    labels: Volume, probs: ProbStack | None, connectivity: int = DEFAULT_CONNECTIVITY
) -> LesionMap:
    """Cluster each lesion grade independently; adjacent voxels of different
    grades never merge.  Without probabilities every score is 1.0 (ground
    truth maps)."""
    return _build_map(labels, probs, connectivity, MAP_GS)


def cs_lesion_maps(
    labels: Volume, probs: ProbStack | None, connectivity: int = DEFAULT_CONNECTIVITY
) -> LesionMap:
    """Cluster the binary union of the three CS grades; touching lesions of
    different CS grades merge into one cluster.  The scoring channel is the
    per-voxel sum of the three CS probability channels."""
    return _build_map(labels, probs, connectivity, MAP_CS)


def lesion_probability_score(c: LesionCluster, probs: ProbStack) -> float:
    """Mean over the cluster's voxels of its scoring channel (the grade's
    channel, or the summed CS channels for a CS-binary cluster)."""
    if c.grade == CS_BINARY:
        chans = [int(g) for g in CS_GRADES]
        channel = probs.data[chans].sum(axis=0, dtype=np.float64)
    else:
        channel = probs.data[int(c.grade)]
    return _mean_over(channel, c.voxels)


def filter_by_volume(m: LesionMap, min_mm3: float = MIN_LESION_VOLUME_MM3) -> LesionMap:
    """Drop clusters whose physical volume is below the threshold; a cluster
    at exactly the threshold is kept."""
    if min_mm3 < 0:
        raise ValueError("min_mm3 must be nonnegative")
    kept = tuple(c for c in m.clusters if c.volume_mm3 >= min_mm3)
    return replace(m, clusters=kept)


def filter_by_zone(m: LesionMap, zone: Volume) -> LesionMap:
    """Keep clusters with at least half their voxels inside the zone mask.

    Selection is per whole cluster, never voxel carving, so it commutes with
    volume filtering."""
    mask = np.asarray(zone.values) != 0
    kept = []
    for c in m.clusters:
        zs, ys, xs = c.index_arrays()
        inside = int(mask[zs, ys, xs].sum())
        if 2 * inside >= c.n_voxels:
            kept.append(c)
    return replace(m, clusters=tuple(kept))
