"""Per-group provisioning of an authentication-free CGI application.

Clones the application directory once per group with a regular naming
scheme (`<app>__<group>`), allocates one socket per clone at consecutive
ports, resets the mutable state files named in the manifest, and emits the
vhosts file plus the rewrite rules that steer each group's users to their
own clone while everyone types the same URL.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

from .rules import Destination, MatchKey, Rewrite, Rule, format_rule
from .util import setup_logging
from .web import VHostBinding, format_vhosts

log = logging.getLogger("dacs.provision")

MANIFEST_NAME = "provision.manifest"
VHOSTS_FILENAME = "vhosts.conf"
FRAGMENT_FILENAME = "rules.fragment"
DEFAULT_RESET = ("count.txt", "0")


class ProvisionError(Exception):
    pass


class SourceMissing(ProvisionError):
    pass


class DestExists(ProvisionError):
    """A clone directory already exists; nothing was written."""


class PortRangeOverflow(ProvisionError):
    pass


class UnknownGroup(ProvisionError):
    pass


@dataclass(frozen=True)
class ProvisionPlan:
    app_name: str
    source_dir: Path
    groups: tuple[str, ...]
    base_ip: str
    base_port: int
    virtual_host_name: str  # the host users type in the URL
    virtual_port: int = 80


@dataclass
class ProvisionResult:
    cloned_dirs: dict[str, Path]
    bindings: list[VHostBinding]
    group_rules: dict[str, Rule]
    vhosts_path: Path
    fragment_path: Path


def plan_rules(plan: ProvisionPlan) -> dict[str, Rule]:
    """The per-group rewrite rules, in group order: port = base + index."""
    match = MatchKey(plan.virtual_host_name, plan.virtual_port)
    return {
        group: Rule(match, Rewrite(Destination(plan.base_ip, plan.base_port + i)))
        for i, group in enumerate(plan.groups)
    }


def load_manifest(source_dir: Path) -> list[tuple[str, str]]:
    """State files to reset in every clone, as (relative path, content).

    The manifest is `provision.manifest` in the source root, one
    `reset=<relpath>:<initial content>` line per file. Without one, every
    file named count.txt in the tree is reset to `0` so cloned counters
    start independent.
    """
    manifest = source_dir / MANIFEST_NAME
    if not manifest.is_file():
        name, content = DEFAULT_RESET
        return [
            (str(found.relative_to(source_dir)), content)
            for found in sorted(source_dir.rglob(name))
        ]
    entries = []
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or key != "reset":
            raise ProvisionError(f"{manifest}:{lineno}: expected reset=<relpath>:<content>")
        relpath, sep, content = value.partition(":")
        if not sep or not relpath:
            raise ProvisionError(f"{manifest}:{lineno}: expected reset=<relpath>:<content>")
        entries.append((relpath, content))
    return entries


def provision(
    plan: ProvisionPlan,
    out_dir: Path,
    *,
    preamble: bool = False,
    enforce: bool = False,
) -> ProvisionResult:
    """Clone, bind, and emit. Destinations are checked up front: if any clone
    directory already exists nothing at all is written."""
    source = Path(plan.source_dir)
    out_dir = Path(out_dir)
    if len(set(plan.groups)) != len(plan.groups):
        raise ProvisionError("group names must be distinct")
    if not plan.groups:
        raise ProvisionError("no groups to provision")
    if not 1 <= plan.base_port <= 65535 or not 1 <= plan.virtual_port <= 65535:
        raise ProvisionError("ports must be in 1..65535")
    if plan.base_port + len(plan.groups) - 1 > 65535:
        raise PortRangeOverflow(
            f"base port {plan.base_port} + {len(plan.groups)} groups passes 65535"
        )
    if not source.is_dir():
        raise SourceMissing(str(source))
    cgi_bin = source / "cgi-bin"
    has_cgi = cgi_bin.is_dir() and any(
        p.is_file() and p.stat().st_mode & 0o111 for p in cgi_bin.iterdir()
    )
    if not has_cgi:
        # document-medium apps need no CGI; warn and continue
        log.warning("no executable under %s/cgi-bin", source)

    dests = {group: out_dir / f"{plan.app_name}__{group}" for group in plan.groups}
    for group, dest in dests.items():
        if dest.exists():
            raise DestExists(str(dest))

    resets = load_manifest(source)
    out_dir.mkdir(parents=True, exist_ok=True)
    for group, dest in dests.items():
        shutil.copytree(source, dest)  # copy2 inside preserves permission bits
        for relpath, content in resets:
            target = dest / relpath
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(content, encoding="utf-8")

    rules = plan_rules(plan)
    bindings = [
        VHostBinding(
            plan.base_ip,
            plan.base_port + i,
            dests[group].resolve(),
            preamble=preamble,
            group=group,
            enforce=enforce,
        )
        for i, group in enumerate(plan.groups)
    ]

    vhosts_path = out_dir / VHOSTS_FILENAME
    vhosts_path.write_text(format_vhosts(bindings), encoding="utf-8")
    fragment_path = out_dir / FRAGMENT_FILENAME
    fragment_path.write_text(_fragment_text(plan, rules), encoding="utf-8")

    return ProvisionResult(
        cloned_dirs={g: d.resolve() for g, d in dests.items()},
        bindings=bindings,
        group_rules=rules,
        vhosts_path=vhosts_path,
        fragment_path=fragment_path,
    )


def _fragment_text(plan: ProvisionPlan, rules: dict[str, Rule]) -> str:
    """Per-group rule lines for pasting into [user <name>] repository sections."""
    lines = [
        f"# rules for app {plan.app_name}: one rewrite per group",
        "# paste each line into the [user <name>] sections of the repository",
    ]
    for group in plan.groups:
        lines.append(f"# {group}")
        lines.append(format_rule(rules[group]))
    return "".join(line + "\n" for line in lines)


def gen_repo_fragment(result: ProvisionResult, users: dict[str, str]) -> str:
    """A loadable repository carrying each user's group rewrite plus the
    group correspondence list, deterministically ordered by user name."""
    for user, group in users.items():
        if group not in result.group_rules:
            raise UnknownGroup(f"{user} maps to unprovisioned group {group}")
    lines = ["[policy]", "priority=user"]
    for user in sorted(users):
        lines.append(f"[user {user}]")
        lines.append(format_rule(result.group_rules[users[user]]))
    lines.append("[groups]")
    for user in sorted(users):
        lines.append(f"{user}={users[user]}")
    return "".join(line + "\n" for line in lines)


def main(argv=None) -> int:
    import argparse

    setup_logging()
    parser = argparse.ArgumentParser(
        prog="dacs-provision", description="clone a CGI application per group"
    )
    parser.add_argument("--app", required=True, metavar="NAME")
    parser.add_argument("--source", required=True, metavar="DIR")
    parser.add_argument("--groups", required=True, metavar="G1,G2,...")
    parser.add_argument("--ip", required=True, metavar="IPV4")
    parser.add_argument("--base-port", required=True, type=int, metavar="N")
    parser.add_argument("--vhost-name", required=True, metavar="HOST")
    parser.add_argument("--vhost-port", type=int, default=80, metavar="N")
    parser.add_argument("--out", required=True, metavar="DIR")
    args = parser.parse_args(argv)

    plan = ProvisionPlan(
        app_name=args.app,
        source_dir=Path(args.source),
        groups=tuple(g for g in args.groups.split(",") if g),
        base_ip=args.ip,
        base_port=args.base_port,
        virtual_host_name=args.vhost_name,
        virtual_port=args.vhost_port,
    )
    try:
        result = provision(plan, Path(args.out))
    except ProvisionError as exc:
        print(f"provision failed: {exc}")
        return 1
    for group in plan.groups:
        print(f"{group}: {result.cloned_dirs[group]} <- {format_rule(result.group_rules[group])}")
    print(f"vhosts file: {result.vhosts_path}")
    print(f"rule fragment: {result.fragment_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
