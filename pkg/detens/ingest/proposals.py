import logging
from dataclasses import dataclass
from enum import StrEnum

from detens.core import BBox
from detens.errors import ValidationError
from detens.storage import Storage


class ProposalSource(StrEnum):
    EXTERNAL_FILE = "external_file"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Proposal:
    image_id: str
    box_index: int
    bbox: BBox
    source: ProposalSource = ProposalSource.EXTERNAL_FILE

    def __post_init__(self):
        object.__setattr__(self, "source", ProposalSource(self.source))

    @property
    def key(self):
        return self.image_id, self.box_index

    def to_dict(self):
        return {"image_id": self.image_id, "box_index": self.box_index, "bbox": self.bbox.as_list(),
                "source": str(self.source)}

    @classmethod
    def from_dict(cls, data):
        return cls(str(data["image_id"]), int(data["box_index"]), BBox.from_list(data["bbox"]),
                   data.get("source", ProposalSource.EXTERNAL_FILE))


def read_proposals(path, storage=None, manifest=None):
    """
    Reads proposals from JSON-lines. With a manifest, proposals of unknown images are rejected and
    boxes must lie within their image.
    """
    storage = storage or Storage()
    proposals = [Proposal.from_dict(row) for row in storage.read_jsonl(path)]
    if manifest is not None:
        records = manifest.by_id()
        for proposal in proposals:
            record = records.get(proposal.image_id)
            if record is None:
                raise ValidationError(f"Proposal {proposal.key} refers to an image missing from {manifest.name}")
            if not proposal.bbox.is_inside(record.width, record.height):
                raise ValidationError(f"Proposal {proposal.key} lies outside image {proposal.image_id}")
    logging.info(f"Loaded {len(proposals)} proposals from {path}")
    return proposals


def write_proposals(path, proposals, storage=None):
    storage = storage or Storage()
    return storage.write_jsonl(path, (proposal.to_dict() for proposal in proposals))


def group_by_image(proposals):
    """
    Groups proposals by image id, keeping first-seen image order and input order within an image.
    """
    groups = {}
    for proposal in proposals:
        groups.setdefault(proposal.image_id, []).append(proposal)
    return groups
