import os
import tempfile
import unittest
from unittest.mock import patch

from bs4 import BeautifulSoup

from detens.core import Annotation, BBox, ClassLabel, DatasetManifest, ImageRecord
from detens.errors import AnnotationFormatError
from detens.storage import Storage


class TestStorage(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.storage = Storage(self.directory.name)

    def tearDown(self):
        self.directory.cleanup()

    def test_relative_paths_resolve_against_root(self):
        self.assertEqual(self.storage.resolve("a/b.txt"), self.storage.root / "a" / "b.txt")

    def test_write_bytes_creates_parents(self):
        path = self.storage.write_bytes("nested/dir/file.bin", b"\x00\x01")

        self.assertEqual(path.read_bytes(), b"\x00\x01")
        self.assertEqual(os.listdir(path.parent), ["file.bin"])

    def test_failed_write_leaves_no_temp_file(self):
        self.storage.write_text("out.txt", "old")
        with patch("detens.storage.os.replace", side_effect=OSError("disk full")):
            with self.assertRaises(OSError):
                self.storage.write_text("out.txt", "new")

        self.assertEqual(self.storage.read_bytes("out.txt"), b"old")
        self.assertEqual(os.listdir(self.directory.name), ["out.txt"])

    def test_read_jsonl_skips_blank_lines(self):
        self.storage.write_text("rows.jsonl", '{"a": 1}\n\n{"a": 2}\n')

        self.assertEqual(self.storage.read_jsonl("rows.jsonl"), [{"a": 1}, {"a": 2}])

    def test_read_jsonl_reports_line(self):
        self.storage.write_text("rows.jsonl", '{"a": 1}\n{"a": \n')

        with self.assertRaisesRegex(AnnotationFormatError, "line 2"):
            self.storage.read_jsonl("rows.jsonl")

    def test_manifest_round_trip(self):
        record = ImageRecord("img", 64, 48, [Annotation(BBox(1, 2, 30, 40), ClassLabel.voc("dog"))])
        manifest = DatasetManifest("VOC2012", [record])

        self.storage.write_manifest("VOC2012.jsonl", manifest)

        self.assertEqual(self.storage.read_manifest("VOC2012.jsonl"), manifest)

    def test_manifest_name_defaults_to_stem(self):
        self.storage.write_text("train.jsonl", "")

        self.assertEqual(self.storage.read_manifest("train.jsonl").name, "train")

    def test_load_document(self):
        soup = self.storage.load_document("<annotation><filename>a.jpg</filename></annotation>")

        self.assertIsInstance(soup, BeautifulSoup)

    def test_map_child_values(self):
        soup = self.storage.load_document("<size><width>500</width><height> 375 </height></size>")
        result = self.storage.map_child_values(soup.find("size"), ["width", "height", "depth"])

        self.assertEqual(result, {"width": "500", "height": "375", "depth": None})
