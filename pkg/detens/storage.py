import json
import logging
import os
import tempfile
from pathlib import Path

from bs4 import BeautifulSoup

from detens.core import DatasetManifest, ImageRecord
from detens.errors import AnnotationFormatError


class Storage:
    """
    File access shared by every pipeline stage: reading annotation documents and JSON-lines
    files, and writing artifacts atomically.

    Attributes
    ----------
    root : pathlib.Path
        Directory that relative paths are resolved against.

    Methods
    -------
    read_bytes(path):
        Return the raw content of a file.
    read_jsonl(path):
        Parse a JSON-lines file into a list of dicts.
    write_bytes(path, data) / write_text(path, text) / write_jsonl(path, rows):
        Write a file through a temporary sibling and an atomic rename.
    read_manifest(path, name=None) / write_manifest(path, manifest):
        Load and store a DatasetManifest as JSON-lines, one ImageRecord per line.
    load_document(content):
        Parse XML content into a BeautifulSoup tree.
    map_child_values(element, keys):
        Map the text of named child elements to the given keys.
    """

    def __init__(self, root=None):
        """
        Initializes the storage with an optional root directory.

        Parameters
        ----------
        root : str or pathlib.Path, optional
            Base directory for relative paths (default is the current working directory).
        """
        self.root = Path(root) if root else Path.cwd()

    def resolve(self, path):
        path = Path(path)
        return path if path.is_absolute() else self.root / path

    def read_bytes(self, path):
        """
        Returns the content of a file as bytes.

        Parameters
        ----------
        path : str or pathlib.Path
            File to read.

        Returns
        -------
        bytes
            The file content.
        """
        resolved = self.resolve(path)
        logging.debug(f"Reading {resolved}")
        return resolved.read_bytes()

    def read_json(self, path):
        try:
            return json.loads(self.read_bytes(path))
        except json.JSONDecodeError as e:
            raise AnnotationFormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e

    def read_jsonl(self, path):
        """
        Parses a JSON-lines file, skipping blank lines.

        Parameters
        ----------
        path : str or pathlib.Path
            File to read.

        Returns
        -------
        list of dict
            One parsed object per non-blank line.
        """
        rows = []
        text = self.read_bytes(path).decode("utf-8")
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise AnnotationFormatError(f"{path}: invalid JSON on line {number}: {e.msg}") from e
        logging.debug(f"Read {len(rows)} rows from {path}")
        return rows

    def write_bytes(self, path, data):
        """
        Writes bytes to a temporary file next to ``path`` and renames it into place.

        Parameters
        ----------
        path : str or pathlib.Path
            Destination file; missing parent directories are created.
        data : bytes
            Content to write.

        Returns
        -------
        pathlib.Path
            The resolved destination.
        """
        resolved = self.resolve(path)
        resolved.parent.mkdir(parents=True, exist_ok=True)
        handle, temp_name = tempfile.mkstemp(dir=resolved.parent, prefix=f".{resolved.name}.")
        try:
            with os.fdopen(handle, "wb") as temp:
                temp.write(data)
            os.replace(temp_name, resolved)
        except BaseException:
            if os.path.exists(temp_name):
                os.unlink(temp_name)
            raise
        logging.debug(f"Wrote {len(data)} bytes to {resolved}")
        return resolved

    def write_text(self, path, text):
        return self.write_bytes(path, text.encode("utf-8"))

    def write_jsonl(self, path, rows):
        lines = [json.dumps(row, ensure_ascii=False) for row in rows]
        return self.write_text(path, "".join(line + "\n" for line in lines))

    def read_manifest(self, path, name=None):
        """
        Loads a manifest; its name defaults to the file stem.
        """
        records = [ImageRecord.from_dict(row) for row in self.read_jsonl(path)]
        manifest = DatasetManifest(name or Path(path).stem, records)
        logging.info(f"Loaded manifest {manifest.name} with {len(manifest)} records from {path}")
        return manifest

    def write_manifest(self, path, manifest):
        logging.info(f"Writing manifest {manifest.name} with {len(manifest)} records to {path}")
        return self.write_jsonl(path, (record.to_dict() for record in manifest))

    @staticmethod
    def load_document(content):
        """
        Loads XML content into a BeautifulSoup object for parsing.

        Parameters
        ----------
        content : bytes or str
            The XML document.

        Returns
        -------
        BeautifulSoup
            The parsed tree.
        """
        return BeautifulSoup(content, "xml")

    @staticmethod
    def map_child_values(element, keys):
        """
        Maps the stripped text of direct child elements to the given keys.

        Parameters
        ----------
        element : bs4.element.Tag
            The parent element.
        keys : list of str
            Child element names to read.

        Returns
        -------
        dict
            Key to text, or None for children that are absent.
        """
        values = {}
        for key in keys:
            child = element.find(key, recursive=False) if element is not None else None
            values[key] = child.get_text(strip=True) if child is not None else None
        return values
