from unittest.mock import Mock

import pytest

from detens.core import BBox, ClassLabel, DatasetSource
from detens.errors import AnnotationFormatError, FieldMissingError, ValidationError
from detens.ingest.voc import VocAnnotation
from detens.storage import Storage

DOCUMENT = b"""<annotation>
    <folder>VOC2012</folder>
    <filename>2008_000008.jpg</filename>
    <size><width>500</width><height>442</height><depth>3</depth></size>
    <segmented>0</segmented>
    <object>
        <name>horse</name>
        <pose>Left</pose>
        <truncated>0</truncated>
        <difficult>0</difficult>
        <bndbox><xmin>53</xmin><ymin>87</ymin><xmax>471</xmax><ymax>420</ymax></bndbox>
    </object>
    <object>
        <name>person</name>
        <difficult>1</difficult>
        <bndbox><xmin>158</xmin><ymin>44</ymin><xmax>289</xmax><ymax>167</ymax></bndbox>
        <part>
            <name>head</name>
            <bndbox><xmin>169</xmin><ymin>50</ymin><xmax>200</xmax><ymax>80</ymax></bndbox>
        </part>
    </object>
    <object>
        <name>diningtable</name>
        <bndbox><xmin>1</xmin><ymin>300</ymin><xmax>520</xmax><ymax>442</ymax></bndbox>
    </object>
</annotation>
"""


@pytest.fixture
def parser():
    return VocAnnotation(Storage(), source=DatasetSource.VOC2012, split="train")


class TestVocAnnotation:
    def test_constructor(self, parser):
        assert isinstance(parser, VocAnnotation)
        assert parser.source is DatasetSource.VOC2012

    def test_parse(self, parser):
        record = parser.parse(DOCUMENT)

        assert record.image_id == "2008_000008"
        assert (record.width, record.height) == (500, 442)
        assert len(record.annotations) == 3

    def test_coordinates_become_zero_based(self, parser):
        horse = parser.parse(DOCUMENT).annotations[0]

        assert horse.bbox == BBox(52, 86, 471, 420)
        assert horse.label == ClassLabel.voc("horse")
        assert horse.difficult is False

    def test_parts_are_not_objects(self, parser):
        person = parser.parse(DOCUMENT).annotations[1]

        assert person.label.name == "person"
        assert person.bbox == BBox(157, 43, 289, 167)
        assert person.difficult is True

    def test_devkit_names_map_to_canonical(self, parser):
        assert parser.parse(DOCUMENT).annotations[2].label.name == "dining table"

    def test_boxes_are_clipped_to_the_image(self, parser):
        assert parser.parse(DOCUMENT).annotations[2].bbox == BBox(0, 299, 500, 442)

    def test_round_trip(self, parser):
        record = parser.parse(DOCUMENT)

        assert parser.parse(parser.serialize(record)) == record

    def test_serialize_writes_devkit_spellings(self, parser):
        document = parser.serialize(parser.parse(DOCUMENT)).decode("utf-8")

        assert "<name>diningtable</name>" in document
        assert "<xmin>53</xmin>" in document

    def test_malformed_xml_names_line(self, parser):
        with pytest.raises(AnnotationFormatError, match="line 3"):
            parser.parse(b"<annotation>\n<filename>a.jpg</filename>\n<size></annotation>")

    def test_missing_bndbox(self, parser):
        document = (b"<annotation><filename>a.jpg</filename><size><width>10</width><height>10</height></size>"
                    b"<object><name>cat</name></object></annotation>")

        with pytest.raises(FieldMissingError, match="object 0"):
            parser.parse(document)

    def test_missing_size(self, parser):
        with pytest.raises(FieldMissingError):
            parser.parse(b"<annotation><filename>a.jpg</filename></annotation>")

    def test_zero_area_box_names_object(self, parser):
        document = (b"<annotation><filename>a.jpg</filename><size><width>10</width><height>10</height></size>"
                    b"<object><name>cat</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax>"
                    b"</bndbox></object><object><name>dog</name><bndbox><xmin>5</xmin><ymin>2</ymin>"
                    b"<xmax>3</xmax><ymax>8</ymax></bndbox></object></annotation>")

        with pytest.raises(ValidationError, match="object 1"):
            parser.parse(document)

    def test_unknown_class(self, parser):
        document = (b"<annotation><filename>a.jpg</filename><size><width>10</width><height>10</height></size>"
                    b"<object><name>truck</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax>"
                    b"</bndbox></object></annotation>")

        with pytest.raises(ValidationError, match="truck"):
            parser.parse(document)

    @pytest.mark.parametrize("size, coordinate", [(b"abc", b"5"), (b"10", b"five"), (b"nan", b"5"), (b"", b"5")])
    def test_non_numeric_values(self, parser, size, coordinate):
        document = (b"<annotation><filename>a.jpg</filename><size><width>" + size + b"</width><height>10</height>"
                    b"</size><object><name>cat</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>" + coordinate +
                    b"</xmax><ymax>5</ymax></bndbox></object></annotation>")

        with pytest.raises(ValidationError, match="a.jpg"):
            parser.parse(document)

    def test_load_many_uses_storage(self):
        storage = Mock()
        storage.read_bytes.return_value = DOCUMENT
        storage.load_document = Storage.load_document
        storage.map_child_values = Storage.map_child_values
        parser = VocAnnotation(storage)

        manifest = parser.load_many(["a.xml"], "VOC2012")

        storage.read_bytes.assert_called_once_with("a.xml")
        assert manifest.name == "VOC2012"
        assert len(manifest) == 1

    @pytest.mark.parametrize("value, expected", [(None, False), ("", False), ("0", False), ("1", True)])
    def test_make_boolean(self, value, expected):
        assert VocAnnotation.make_boolean(value) is expected
