"""Regenerate the bundled three-frame KITTI-format sequence in src/siammo/data/kitti_mini."""
import math
import os

import numpy as np

from siammo.geometry import Box3D
from siammo.pointcloud_io import sample_box_surface, serialize_velodyne

ROOT = os.path.join(os.path.dirname(__file__), "..", "src", "siammo", "data", "kitti_mini")

# LiDAR (x fwd, y left, z up) -> camera (x right, y down, z fwd), plus an offset
TR_VELO_CAM = np.array([[0.0, -1.0, 0.0, 0.06],
                        [0.0, 0.0, -1.0, -0.08],
                        [1.0, 0.0, 0.0, -0.27]])
R_RECT = np.eye(3)


def lidar_box_to_label(frame, track, kind, box):
    """Inverse of the parser's convention: camera bottom-center, rotation_y = -yaw - pi/2."""
    m = np.eye(4)
    m[:3, :] = TR_VELO_CAM
    cam_center = (R_RECT @ (m @ np.r_[box.center, 1.0])[:3])
    x, y, z = cam_center + [0.0, box.h / 2, 0.0]
    ry = -box.yaw - math.pi / 2
    ry = (ry + math.pi) % (2 * math.pi) - math.pi
    # KITTI: h w l with l along the heading (our Box3D.w)
    return (f"{frame} {track} {kind} 0 0 0.0 100.0 120.0 300.0 250.0 "
            f"{box.h:.6f} {box.l:.6f} {box.w:.6f} {x:.6f} {y:.6f} {z:.6f} {ry:.6f}")


def main():
    rng = np.random.default_rng(2024)
    for d in ("velodyne/0000", "label_02", "calib"):
        os.makedirs(os.path.join(ROOT, d), exist_ok=True)
    boxes = [Box3D(10.0 + 0.5 * t, 2.0 + 0.1 * t, -0.9, 3.9, 1.6, 1.5, 0.1 + 0.02 * t) for t in range(3)]
    rows = []
    for t, box in enumerate(boxes):
        pts = sample_box_surface(box, 20.0, 0.01, rng)
        ground = np.column_stack([rng.uniform(0, 30, 300), rng.uniform(-15, 15, 300), np.full(300, -1.7)])
        cloud = np.concatenate([pts, ground])
        with open(os.path.join(ROOT, "velodyne", "0000", f"{t:06d}.bin"), "wb") as f:
            f.write(serialize_velodyne(cloud, rng.uniform(0, 1, len(cloud))))
        rows.append(lidar_box_to_label(t, 0, "Car", box))
        rows.append(f"{t} -1 DontCare -1 -1 -10.0 0.0 0.0 10.0 10.0 -1000 -1000 -1000 -1000 -1000 -1000 -10")
    rows.append(lidar_box_to_label(1, 1, "Pedestrian", Box3D(6.0, -3.0, -0.8, 0.8, 0.6, 1.8, 1.0)))
    with open(os.path.join(ROOT, "label_02", "0000.txt"), "w") as f:
        f.write("\n".join(rows) + "\n")
    with open(os.path.join(ROOT, "calib", "0000.txt"), "w") as f:
        f.write("P2: 721.5 0 609.6 44.9 0 721.5 172.9 0.2 0 0 1 0.003\n")
        f.write("R_rect " + " ".join(f"{v:.6f}" for v in R_RECT.ravel()) + "\n")
        f.write("Tr_velo_cam " + " ".join(f"{v:.6f}" for v in TR_VELO_CAM.ravel()) + "\n")


if __name__ == "__main__":
    main()
