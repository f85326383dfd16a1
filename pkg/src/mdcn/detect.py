"""Turn raw network outputs into scored, class-labelled boxes."""

import numpy as np

from .images import preprocess
from .kitti import CLASSES, DetectionRecord, nms
from .multibox import VARIANCES, anchors_for_network, center_to_corners, decode
from .kernels import softmax


def postprocess(loc, logits, anchors, class_names=CLASSES, conf_floor=0.01, nms_threshold=0.45, top_k=200, pre_nms_top_k=400):
    """Decode one image's predictions into detections in normalized corners.

    Per class: drop scores below ``conf_floor``, keep the ``pre_nms_top_k``
    best, run NMS; then keep the ``top_k`` best overall.  Output order is by
    descending confidence.
    """
    anchor_boxes = anchors.boxes if hasattr(anchors, "boxes") else anchors
    # bound log-size offsets so untrained heads cannot overflow exp()
    loc = np.clip(loc, -50.0, 50.0)
    boxes = np.clip(center_to_corners(decode(loc, anchor_boxes, VARIANCES)), 0.0, 1.0)
    probs = softmax(logits, axis=-1)
    out = []
    for c, name in enumerate(class_names, start=1):
        scores = probs[:, c]
        idx = np.flatnonzero(scores > conf_floor)
        idx = idx[np.argsort(-scores[idx], kind="stable")[:pre_nms_top_k]]
        cands = []
        for i in idx:
            b = boxes[i]
            if b[2] > b[0] and b[3] > b[1]:
                cands.append(DetectionRecord(name, tuple(b), float(scores[i])))
        out.extend(nms(cands, nms_threshold))
    order = sorted(range(len(out)), key=lambda j: -out[j].confidence)
    return [out[j] for j in order[:top_k]]


class Detector:
    """Callable image -> detections in the image's own pixel frame."""

    def __init__(self, network, anchors=None, class_names=CLASSES, conf_floor=0.01, nms_threshold=0.45, top_k=200, smin=0.2, smax=0.9):
        self.network = network
        self.size = network.graph.input_size
        self.anchors = anchors if anchors is not None else anchors_for_network(network, smin=smin, smax=smax)
        self.class_names = tuple(class_names)
        self.conf_floor = conf_floor
        self.nms_threshold = nms_threshold
        self.top_k = top_k

    def detect_batch(self, images):
        x = np.stack([preprocess(img, self.size) for img in images])
        loc, logits, _ = self.network.forward(x, keep=False)
        results = []
        for img, l, c in zip(images, loc, logits):
            _, h, w = img.shape
            scale = np.array([w, h, w, h], dtype=np.float64)
            dets = postprocess(l, c, self.anchors, self.class_names, self.conf_floor, self.nms_threshold, self.top_k)
            results.append([DetectionRecord(d.cls, tuple(np.array(d.box) * scale), d.confidence) for d in dets])
        return results

    def __call__(self, image):
        return self.detect_batch([image])[0]
