"""Random small detection instances shared by unit and acceptance tests."""

from bitefuse.annotations import Annotation, AnnotationSet, BoundingBox, CariesClass, ImageInfo

CLASSES = ("enamel_caries", "dentine_caries")
IMAGES = ("a", "b")
CONFIDENCES = (0.1, 0.25, 0.5, 0.5, 0.75, 0.9, 1.0)


def _box(rng):
    # small integer grid so overlaps are frequent and IoU ties happen
    x0, y0 = (int(v) for v in rng.integers(0, 8, 2))
    w, h = (int(v) for v in rng.integers(1, 6, 2))
    return (x0, y0, x0 + w, y0 + h)


def random_instance(rng, max_preds=6, max_gt=4):
    """Tuples for the oracle: preds (image, label, box, conf, source), gts (image, label, box)."""
    gts = {}
    for _ in range(int(rng.integers(0, max_gt + 1))):
        item = (str(rng.choice(IMAGES)), str(rng.choice(CLASSES)), _box(rng))
        gts[item] = item
    preds = {}
    for _ in range(int(rng.integers(0, max_preds + 1))):
        image, label, box = str(rng.choice(IMAGES)), str(rng.choice(CLASSES)), _box(rng)
        if gts and rng.random() < 0.5:
            # perturb a GT box to get a realistic share of hits
            image, label, gbox = list(gts)[int(rng.integers(len(gts)))]
            dx, dy = (int(v) for v in rng.integers(-1, 2, 2))
            x0, y0 = max(gbox[0] + dx, 0), max(gbox[1] + dy, 0)
            box = (x0, y0, max(gbox[2] + dx + 1, x0 + 1), max(gbox[3] + dy, y0 + 1))
        source = f"s{int(rng.integers(0, 3))}"
        preds[(image, label, box, source)] = (image, label, box, float(rng.choice(CONFIDENCES)), source)
    return list(preds.values()), list(gts.values())


def to_sets(preds, gts):
    images = [ImageInfo(i, 20, 20) for i in IMAGES]
    p = AnnotationSet(images, [Annotation(i, s, CariesClass.parse(lab), BoundingBox(*b), c)
                               for i, lab, b, c, s in preds])
    g = AnnotationSet(images, [Annotation(i, "gt", CariesClass.parse(lab), BoundingBox(*b))
                               for i, lab, b in gts])
    return p, g
