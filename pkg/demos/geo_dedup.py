"""Place detections on the map and merge repeats of the same storefront.

Each street is photographed from three camera positions a metre apart, so
every storefront is seen three times. Clustering at 5 m should leave one
point per storefront.
"""

from storefront.geo import geo_cluster, haversine_m, locate_detection
from storefront.geometry import Detection
from storefront.synth import Business, GeoPose, SceneSpec, moved_camera, storefront_boxes

points, truth = [], []
for s in range(5):
    base = SceneSpec(seed=s, businesses=tuple(Business(p, 2.0, 4.0, 2 * k) for k, p in enumerate((-6.0, 0.0, 6.0))),
                     pose=GeoPose(10 + 0.01 * s, 20 + 0.01 * s, 37.0 * s % 360), facade_distance=10.0)
    for p, off in enumerate((-1.0, 0.0, 1.0)):
        spec = moved_camera(base, off, seed=10 * s + p)
        for box, k in zip(*storefront_boxes(spec)):
            g = locate_detection(spec.pose, Detection(box, 1.0, None, "", f"street{s}-pos{p}"))
            err = haversine_m(g.lat, g.lng, *spec.facade_latlng(spec.businesses[k].position))
            points.append(g)
            truth.append((s, k, err))

print(f"{len(points)} detections, worst placement error {max(e for *_, e in truth):.2f} m")

clusters = geo_cluster(points, 5.0)
print(f"{len(clusters)} clusters")
for c in clusters[:5]:
    print(f"  ({c.lat:.6f}, {c.lng:.6f})  {len(c.members)} views: {[m.source_pano for m in c.members]}")
