import logging
import math
from pathlib import PurePosixPath

from lxml import etree

from detens.core import (VOC_CLASSES, VOC_DEVKIT_NAMES, Annotation, BBox, ClassLabel, DatasetManifest,
                         DatasetSource, ImageRecord)
from detens.errors import AnnotationFormatError, FieldMissingError, InvalidBoxError, ValidationError
from detens.storage import Storage

_DEVKIT_TO_CANONICAL = {devkit: canonical for canonical, devkit in VOC_DEVKIT_NAMES.items()}
_BNDBOX_KEYS = ["xmin", "ymin", "xmax", "ymax"]


class VocAnnotation:
    """
    The VocAnnotation class reads and writes PASCAL VOC annotation XML.

    VOC files use 1-based inclusive pixel coordinates; records use 0-based half-open ones, so
    ``xmin`` and ``ymin`` lose one on the way in and gain it back on the way out.

    Attributes:
        storage (Storage): File access used by ``load`` and ``load_many``.
        source (DatasetSource): Tag stamped on parsed records and annotations.
        split (str): Split tag stamped on parsed records.
    """

    def __init__(self, storage=None, source=DatasetSource.VOC2012, split="train"):
        self.storage = storage or Storage()
        self.source = DatasetSource(source)
        self.split = split

    def load(self, path):
        return self.parse(self.storage.read_bytes(path))

    def load_many(self, paths, name):
        """
        Parses several annotation files into one manifest.

        Parameters:
            paths (list): Annotation XML files.
            name (str): Manifest name, e.g. VOC2012.

        Returns:
            DatasetManifest: One record per file, in the given order.
        """
        records = [self.load(path) for path in paths]
        logging.info(f"Parsed {len(records)} VOC annotation files into {name}")
        return DatasetManifest(name, records)

    def parse(self, document):
        """
        Parses one VOC annotation document.

        Parameters:
            document (bytes): The XML content.

        Returns:
            ImageRecord: One ground-truth annotation per ``object`` element.

        Raises:
            AnnotationFormatError: If the XML is malformed (the message names the line).
            FieldMissingError: If a required element is missing.
            ValidationError: If a size or coordinate is not a number, or an object's box has no area.
        """
        self._check_well_formed(document)
        soup = self.storage.load_document(document)
        root = soup.find("annotation")
        if root is None:
            raise FieldMissingError("Document has no <annotation> root element")

        filename = self._require_text(root, "filename", "annotation")
        size = self.storage.map_child_values(root.find("size", recursive=False), ["width", "height"])
        if size["width"] is None or size["height"] is None:
            raise FieldMissingError(f"{filename}: <size> needs <width> and <height>")
        width, height = (int(value) for value in self._numbers(size, filename, "<size>"))

        annotations = [self.parse_object(obj, index, filename, width, height)
                       for index, obj in enumerate(root.find_all("object", recursive=False))]
        image_id = PurePosixPath(filename).stem
        logging.debug(f"Parsed VOC record {image_id} with {len(annotations)} objects")
        return ImageRecord(image_id, width, height, annotations, self.source, self.split)

    def parse_object(self, obj, index, filename, width, height):
        name = self._require_text(obj, "name", f"object {index}").lower()
        name = _DEVKIT_TO_CANONICAL.get(name, name)
        if name not in VOC_CLASSES:
            raise ValidationError(f"{filename}: object {index} has unknown class '{name}'")

        bndbox = obj.find("bndbox", recursive=False)
        if bndbox is None:
            raise FieldMissingError(f"{filename}: object {index} has no <bndbox>")
        coords = self.storage.map_child_values(bndbox, _BNDBOX_KEYS)
        missing = [key for key, value in coords.items() if value is None]
        if missing:
            raise FieldMissingError(f"{filename}: object {index} <bndbox> lacks {', '.join(missing)}")

        x_min, y_min, x_max, y_max = self._numbers(coords, filename, f"object {index} <bndbox>")
        try:
            bbox = BBox(x_min - 1, y_min - 1, x_max, y_max)
        except InvalidBoxError as e:
            raise ValidationError(f"{filename}: object {index} has an invalid box: {e}") from e
        if not bbox.is_inside(width, height):
            logging.debug(f"{filename}: clipping object {index} to {width}x{height}")
            bbox = bbox.clip(width, height)

        difficult = self.storage.map_child_values(obj, ["difficult"])["difficult"]
        return Annotation(bbox=bbox, label=ClassLabel.voc(name), difficult=self.make_boolean(difficult),
                          source=self.source)

    def serialize(self, record):
        """
        Writes a record back to VOC XML; sampled negatives are not written.

        Parameters:
            record (ImageRecord): A record whose ground truth is in the voc namespace.

        Returns:
            bytes: UTF-8 encoded XML.
        """
        soup = self.storage.load_document("")
        root = soup.new_tag("annotation")
        soup.append(root)
        self._append(soup, root, "filename", f"{record.image_id}.jpg")
        size = self._append(soup, root, "size")
        self._append(soup, size, "width", str(record.width))
        self._append(soup, size, "height", str(record.height))
        self._append(soup, size, "depth", "3")

        for annotation in record.ground_truth:
            obj = self._append(soup, root, "object")
            name = annotation.label.name
            self._append(soup, obj, "name", VOC_DEVKIT_NAMES.get(name, name))
            self._append(soup, obj, "difficult", "1" if annotation.difficult else "0")
            bndbox = self._append(soup, obj, "bndbox")
            box = annotation.bbox
            for key, value in zip(_BNDBOX_KEYS, (box.x_min + 1, box.y_min + 1, box.x_max, box.y_max)):
                self._append(soup, bndbox, key, self.format_coordinate(value))
        return str(soup).encode("utf-8")

    @staticmethod
    def _check_well_formed(document):
        if isinstance(document, str):
            document = document.encode("utf-8")
        try:
            etree.fromstring(document, parser=etree.XMLParser(resolve_entities=False))
        except etree.XMLSyntaxError as e:
            raise AnnotationFormatError(f"Malformed VOC XML at line {e.lineno}: {e.msg}") from e

    @staticmethod
    def _require_text(element, key, where):
        child = element.find(key, recursive=False)
        if child is None or not child.get_text(strip=True):
            raise FieldMissingError(f"{where} is missing <{key}>")
        return child.get_text(strip=True)

    @staticmethod
    def _numbers(values, filename, where):
        numbers = []
        for key, text in values.items():
            try:
                number = float(text)
            except ValueError:
                raise ValidationError(f"{filename}: {where} <{key}> is not a number: '{text}'") from None
            if not math.isfinite(number):
                raise ValidationError(f"{filename}: {where} <{key}> is not finite: '{text}'")
            numbers.append(number)
        return numbers

    @staticmethod
    def _append(soup, parent, name, text=None):
        tag = soup.new_tag(name)
        if text is not None:
            tag.string = text
        parent.append(tag)
        return tag

    @staticmethod
    def format_coordinate(value):
        return str(int(value)) if float(value).is_integer() else repr(float(value))

    @staticmethod
    def make_boolean(value):
        """
        Reads a VOC flag element; absent or empty means false.
        """
        if value is None or value == "":
            return False
        return int(float(value)) != 0
