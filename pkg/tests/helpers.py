"""Small builders shared by several test modules."""

from flankid.annotations import ImageRecord, LabeledBox


def record(image_id, boxes, individual=None, width=400, height=300, path=""):
    return ImageRecord(image_id, path or f"{image_id}.png", "tiger", individual,
                       [LabeledBox(*b) for b in boxes], width=width, height=height, depth=3)
