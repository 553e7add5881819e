"""Multi-view pose agreement.

Per-frame pose estimates are moved to the world frame and pushed into a
small per-instance ring buffer. Once the buffer is full, all ordered
pairs are compared with the pose loss; when enough pairs agree below the
distance threshold, the buffered pose with the most agreeing partners is
returned, and the object can be spawned into the map.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .geometry import ObjectModel, Pose, compose
from .losses import add_loss, adds_loss


@dataclass
class HypothesisBuffer:
    """Ring buffer of recent world-frame poses for one instance."""

    capacity: int = 5
    threshold: float = 0.02        # meters on the pose loss
    min_agreements: int = 12       # out of capacity * (capacity - 1) pairs
    poses: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 2:
            raise ValueError("capacity must be >= 2")
        if self.threshold <= 0 or self.min_agreements <= 0:
            raise ValueError("thresholds must be positive")


def to_world(pose_cam: Pose, camera_pose: Pose) -> Pose:
    """Object pose in world frame given its camera-frame estimate."""
    return compose(camera_pose, pose_cam)


def push_and_check(buf: HypothesisBuffer, pose_world: Pose,
                   model: ObjectModel):
    """Append a pose; if the buffer is full, run the agreement test.

    Returns the agreed pose (the buffered pose with the most
    under-threshold partners, ties to the most recent) once at least
    min_agreements of the N(N-1) ordered pair losses fall under the
    threshold, else None. Symmetric models are compared with the
    nearest-neighbor pose loss.
    """
    buf.poses.append(pose_world)
    while len(buf.poses) > buf.capacity:
        buf.poses.popleft()
    if len(buf.poses) < buf.capacity:
        return None
    loss = adds_loss if model.symmetric else add_loss
    poses = list(buf.poses)
    n = len(poses)
    partners = [0] * n
    m = 0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if loss(poses[i], poses[j], model.points) < buf.threshold:
                m += 1
                partners[i] += 1
    if m < buf.min_agreements:
        return None
    best = max(range(n), key=lambda i: (partners[i], i))  # tie: most recent
    return poses[best]
