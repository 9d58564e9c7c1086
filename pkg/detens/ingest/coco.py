import json
import logging
import math

from detens.core import (COCO_CATEGORIES, Annotation, BBox, ClassLabel, DatasetManifest, DatasetSource,
                         ImageRecord, Namespace)
from detens.errors import AnnotationFormatError, FieldMissingError, ReferentialIntegrityError, ValidationError
from detens.storage import Storage

_CATEGORY_IDS = {name: category_id for category_id, name in COCO_CATEGORIES}


class CocoAnnotation:
    """
    The CocoAnnotation class converts COCO instances JSON to and from a DatasetManifest.

    Segmentation masks are ignored. ``iscrowd`` annotations become difficult boxes, zero-area
    boxes are dropped with a warning, and boxes overhanging the image edge by float rounding
    are clipped.
    """

    def __init__(self, storage=None, source=DatasetSource.COCO2014, split="trainval"):
        self.storage = storage or Storage()
        self.source = DatasetSource(source)
        self.split = split

    def load(self, path, name="COCO2014"):
        return self.parse(self.storage.read_bytes(path), name)

    def parse(self, document, name="COCO2014"):
        """
        Parses a COCO instances document.

        Parameters:
            document (bytes): The JSON content.
            name (str): Name of the resulting manifest.

        Returns:
            DatasetManifest: One record per ``images`` entry, labels in the coco namespace.

        Raises:
            AnnotationFormatError: If the document is not a valid JSON object.
            FieldMissingError: If a top-level array or an image, category or annotation field is missing.
            ReferentialIntegrityError: If an annotation names an unknown image or category.
            ValidationError: If a size or box is not numeric, or a box has negative width or height.
        """
        try:
            data = json.loads(document)
        except json.JSONDecodeError as e:
            raise AnnotationFormatError(f"Malformed COCO JSON at line {e.lineno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise AnnotationFormatError("COCO document must be a JSON object")
        for key in ("images", "annotations", "categories"):
            if key not in data:
                raise FieldMissingError(f"COCO document has no '{key}' array")

        categories = {}
        for index, category in enumerate(data["categories"]):
            self._require(category, ("id", "name"), f"category {index}")
            categories[category["id"]] = ClassLabel.coco(str(category["name"]).lower())
        images = {}
        for index, image in enumerate(data["images"]):
            self._require(image, ("id", "width", "height"), f"image {index}")
            width, height = self._numbers([image["width"], image["height"]], f"image {index} size")
            images[image["id"]] = (str(image["id"]), int(width), int(height))
        annotations = {image_id: [] for image_id in images}

        skipped = 0
        for index, item in enumerate(data["annotations"]):
            annotation = self.parse_annotation(item, index, images, categories)
            if annotation is None:
                skipped += 1
                continue
            annotations[item["image_id"]].append(annotation)
        if skipped:
            logging.warning(f"Skipped {skipped} zero-area COCO annotations")

        records = [ImageRecord(image_id, width, height, annotations[key], self.source, self.split)
                   for key, (image_id, width, height) in images.items()]
        logging.info(f"Parsed COCO document into {name}: {len(records)} images, "
                     f"{sum(len(items) for items in annotations.values())} annotations")
        return DatasetManifest(name, records)

    def parse_annotation(self, item, index, images, categories):
        self._require(item, ("image_id", "category_id", "bbox"), f"annotation {index}")
        if item["image_id"] not in images:
            raise ReferentialIntegrityError(f"COCO annotation {index} references unknown image_id {item['image_id']}")
        if item["category_id"] not in categories:
            raise ReferentialIntegrityError(
                f"COCO annotation {index} references unknown category_id {item['category_id']}")

        if not isinstance(item["bbox"], list) or len(item["bbox"]) != 4:
            raise ValidationError(f"COCO annotation {index} bbox must be [x, y, w, h], got {item['bbox']!r}")
        x, y, w, h = self._numbers(item["bbox"], f"annotation {index} bbox")
        if w < 0 or h < 0:
            raise ValidationError(f"COCO annotation {index} has negative size {w}x{h}")
        if w == 0 or h == 0:
            logging.debug(f"COCO annotation {index} has zero area, skipping")
            return None

        image_id, width, height = images[item["image_id"]]
        bbox = BBox(x, y, x + w, y + h)
        if not bbox.is_inside(width, height):
            bbox = bbox.clip(width, height)
        return Annotation(bbox=bbox, label=categories[item["category_id"]],
                          difficult=bool(item.get("iscrowd", 0)), source=self.source)

    def serialize(self, manifest):
        """
        Writes a coco-namespace manifest back to COCO instances JSON.

        Parameters:
            manifest (DatasetManifest): Records whose ground truth carries coco labels.

        Returns:
            bytes: UTF-8 encoded JSON using the official category ids.
        """
        images, annotations = [], []
        for record in manifest:
            images.append({"id": self.coco_id(record.image_id), "file_name": f"{record.image_id}.jpg",
                           "width": record.width, "height": record.height})
            for annotation in record.ground_truth:
                if annotation.label.namespace is not Namespace.COCO:
                    continue
                box = annotation.bbox
                annotations.append({
                    "id": len(annotations) + 1,
                    "image_id": self.coco_id(record.image_id),
                    "category_id": _CATEGORY_IDS[annotation.label.name],
                    "bbox": [box.x_min, box.y_min, box.width, box.height],
                    "area": box.area,
                    "iscrowd": 1 if annotation.difficult else 0,
                })
        categories = [{"id": category_id, "name": name} for category_id, name in COCO_CATEGORIES]
        document = {"images": images, "annotations": annotations, "categories": categories}
        return json.dumps(document).encode("utf-8")

    @staticmethod
    def coco_id(image_id):
        """
        COCO ids are integers; ids that round-trip through int are written as such.
        """
        return int(image_id) if image_id.isdigit() and str(int(image_id)) == image_id else image_id

    @staticmethod
    def _require(item, keys, what):
        if not isinstance(item, dict):
            raise AnnotationFormatError(f"COCO {what} must be a JSON object, got {type(item).__name__}")
        for key in keys:
            if key not in item:
                raise FieldMissingError(f"COCO {what} has no '{key}'")

    @staticmethod
    def _numbers(values, what):
        try:
            numbers = [float(value) for value in values]
        except (TypeError, ValueError):
            raise ValidationError(f"COCO {what} is not numeric: {values!r}") from None
        if not all(math.isfinite(number) for number in numbers):
            raise ValidationError(f"COCO {what} is not finite: {values!r}")
        return numbers
