"""End-to-end runs on synthetic scenes without touching the disk."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .errors import TrackingLost
from .evaluation import collect, evaluate
from .imaging import build_pyramid
from .joint import track_deformable
from .synth import GroundTruth, Scene, gt_surfel_track, render_frame, select_anchors
from .tracker import TrackConfig, prepare_surfels, track_static

log = logging.getLogger(__name__)
MODES = ("static", "deform", "rigid_map")


@dataclass
class SceneSetup:
    scene: Scene
    surfels: list
    pixels: list
    gt: GroundTruth
    frames: list  # delivered frames after the reference


def setup_scene(scene: Scene, spacing: int = 80, levels: int = 3, half_extent: int = 11,
                margin: int = 40, max_count: int | None = None) -> SceneSetup:
    """Reference surfels at grid anchors of frame 0 plus their ground truth."""
    img, depth = render_frame(scene, 0.0)
    pixels, anchors = select_anchors(scene, spacing, margin, half_extent, max_count)
    surfels = prepare_surfels(build_pyramid(img, levels), depth, scene.intrinsics, pixels, half_extent,
                              ids=[a.id for a in anchors])
    gt = gt_surfel_track(scene, anchors, [0] + scene.frame_indices()[1:])
    return SceneSetup(scene, surfels, pixels, gt, scene.frame_indices()[1:])


def scene_pyramids(scene: Scene, frames, levels: int):
    for t in frames:
        yield t, build_pyramid(render_frame(scene, t)[0], levels)


def run_tracking(frames, surfels, K, mode: str, config: TrackConfig):
    """Dispatch to the tracker; returns ``(results, lost_message)``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    try:
        if mode == "static":
            return track_static(frames, surfels, K, config), None
        return track_deformable(frames, surfels, K, config, mode=mode), None
    except TrackingLost as exc:
        log.warning("tracking lost after %d frames: %s", exc.frames_processed, exc)
        return exc.results or [], str(exc)


def run_scene(setup: SceneSetup, mode: str = "static", config: TrackConfig | None = None,
              frames=None) -> tuple[list, dict]:
    """Track a prepared scene and score it against the ground truth."""
    cfg = config or TrackConfig()
    frames = setup.frames if frames is None else list(frames)
    results, lost = run_tracking(scene_pyramids(setup.scene, frames, cfg.levels), setup.surfels,
                                 setup.scene.intrinsics, mode, cfg)
    metrics = evaluate(collect(results, setup.surfels), setup.gt)
    metrics["lost"] = lost
    return results, metrics
