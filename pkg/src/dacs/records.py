"""Flat record store backing the data-extraction CGI programs.

One record per line, `user|group|payload`; extraction scopes are per-user,
per-group, and all-users. Authorization comes from the identity registry:
the requester is whoever the registry says owns the source address, never a
client-supplied name.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

SCOPE_USER = "user"
SCOPE_GROUP = "group"
SCOPE_ALL = "all"


class RecordFormatError(ValueError):
    """A store line that is not exactly `user|group|payload`."""


class Unidentified(Exception):
    """The requester's address is not in the identity registry (HTTP 403)."""


class GroupForbidden(Exception):
    """The requester does not belong to the requested group (HTTP 403)."""


@dataclass(frozen=True)
class Record:
    owner_user: str
    owner_group: str
    payload: str


def parse_records(text: str) -> list[Record]:
    records = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line:
            continue
        parts = line.split("|")
        if len(parts) != 3:
            raise RecordFormatError(f"line {lineno}: expected user|group|payload")
        records.append(Record(*parts))
    return records


def format_records(records) -> str:
    for record in records:
        for field in (record.owner_user, record.owner_group, record.payload):
            if "|" in field or "\n" in field:
                raise RecordFormatError(f"'|' or LF in record field {field!r}")
    return "".join(f"{r.owner_user}|{r.owner_group}|{r.payload}\n" for r in records)


def load_records(path) -> list[Record]:
    return parse_records(Path(path).read_text(encoding="utf-8"))


def extract_records(
    records,
    scope: str,
    requested_group: str | None = None,
    *,
    registry_user: str | None = None,
    registry_groups=(),
) -> list[str]:
    """Return the payloads the requester may see under the given scope.

    user scope: records owned by the registry-resolved user.
    group scope: records of the requested group (membership required), or of
    every group the requester belongs to when no group is requested.
    all scope: every record, no identification needed.
    """
    if scope == SCOPE_ALL:
        return [r.payload for r in records]
    if registry_user is None:
        raise Unidentified("requester address is not in the identity registry")
    if scope == SCOPE_USER:
        return [r.payload for r in records if r.owner_user == registry_user]
    if scope == SCOPE_GROUP:
        if requested_group is None:
            mine = set(registry_groups)
            return [r.payload for r in records if r.owner_group in mine]
        if requested_group not in registry_groups:
            raise GroupForbidden(f"not a member of {requested_group}")
        return [r.payload for r in records if r.owner_group == requested_group]
    raise ValueError(f"unknown scope {scope!r}")
