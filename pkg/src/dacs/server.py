"""Rule server: persistent repository, per-login merge, admin-triggered
redistribution, group list, and identity notification toward the web tier.

The repository is one flat file, reloaded atomically on push: agents see
either the old rules or the new rules, never a mixture, and a file that no
longer parses leaves the running repository untouched.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .rules import (
    Client,
    DacsRule,
    DuplicateMatchKey,
    PriorityPolicy,
    RuleSet,
    RuleSyntaxError,
    User,
    format_rule,
    merge_rules,
    parse_rule,
    validate_rule,
)
from .util import close_listener, format_hostport, parse_hostport, setup_logging
from .wire import Ack, ErrorMsg, Login, MessageStream, PushNotice, RuleSetMsg, WireError

log = logging.getLogger("dacs.server")


class RepositoryError(Exception):
    pass


class RepoParseError(RepositoryError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class InvariantViolation(RepositoryError):
    pass


class ReloadError(RepositoryError):
    """A push found an unloadable repository file; nothing was distributed."""


@dataclass
class Repository:
    policy: PriorityPolicy
    user_rules: dict[str, list[DacsRule]] = field(default_factory=dict)
    client_rules: dict[str, list[DacsRule]] = field(default_factory=dict)
    groups: dict[str, list[str]] = field(default_factory=dict)
    version_counter: int = 0


def _check_group_name(name: str, lineno: int) -> str:
    if not name or any(c.isspace() for c in name) or set("|=,") & set(name):
        raise InvariantViolation(f"line {lineno}: bad group name {name!r}")
    return name


def load_repository(path) -> Repository:
    """Parse and fully validate a repository file; any violation aborts."""
    text = Path(path).read_text(encoding="utf-8")
    policy: PriorityPolicy | None = None
    user_rules: dict[str, list[DacsRule]] = {}
    client_rules: dict[str, list[DacsRule]] = {}
    groups: dict[str, list[str]] = {}
    section: tuple | None = None

    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            header = line[1:-1].strip()
            if header == "policy":
                section = ("policy",)
            elif header == "groups":
                section = ("groups",)
            elif header.startswith("user "):
                section = ("user", header[5:].strip())
            elif header.startswith("client "):
                section = ("client", header[7:].strip())
            else:
                raise RepoParseError(lineno, f"unknown section {line!r}")
            continue
        if section is None:
            raise RepoParseError(lineno, "content before any section header")

        if section[0] == "policy":
            key, sep, value = line.partition("=")
            if not sep or key != "priority":
                raise RepoParseError(lineno, f"expected priority=user|client, got {line!r}")
            if policy is not None:
                raise RepoParseError(lineno, "priority set twice")
            try:
                policy = PriorityPolicy(value)
            except ValueError:
                raise RepoParseError(lineno, f"unknown priority {value!r}") from None
        elif section[0] in ("user", "client"):
            try:
                rule = parse_rule(line)
            except RuleSyntaxError as exc:
                raise RepoParseError(lineno, str(exc)) from None
            subject = User(section[1]) if section[0] == "user" else Client(section[1])
            entry = DacsRule(subject, rule.match, rule.action)
            problems = validate_rule(entry)
            if problems:
                raise InvariantViolation(f"line {lineno}: " + "; ".join(problems))
            bucket = user_rules if section[0] == "user" else client_rules
            entries = bucket.setdefault(section[1], [])
            if any(e.match == entry.match for e in entries):
                raise InvariantViolation(
                    f"line {lineno}: duplicate match key for {section[0]} {section[1]}"
                )
            entries.append(entry)
        else:  # groups
            name, sep, value = line.partition("=")
            if not sep:
                raise RepoParseError(lineno, f"expected user=group[,group...], got {line!r}")
            if not name or any(c.isspace() for c in name) or "|" in name:
                raise InvariantViolation(f"line {lineno}: bad user name {name!r}")
            if name in groups:
                raise InvariantViolation(f"line {lineno}: groups for {name!r} set twice")
            groups[name] = [_check_group_name(g, lineno) for g in value.split(",")] if value else []

    if policy is None:
        raise InvariantViolation("missing [policy] section with priority=")
    return Repository(policy, user_rules, client_rules, groups)


def get_groups(repo: Repository, user: str) -> list[str]:
    """The user's groups in repository order; unknown users have none."""
    return list(repo.groups.get(user, []))


def compose_login_rules(repo: Repository, user: str, client_ip: str, version: int) -> RuleSet:
    """Merge the user's and the client's rules under the repository policy.

    Unknown users get an empty user side (client rules still apply), so a
    controlled machine stays controlled no matter who logs in.
    """
    return merge_rules(
        repo.user_rules.get(user, []),
        repo.client_rules.get(client_ip, []),
        repo.policy,
        version=version,
    )


class _Session:
    def __init__(self, user: str, client_ip: str, stream: MessageStream):
        self.user = user
        self.client_ip = client_ip
        self.stream = stream
        self.delivered_version = -1
        self.send_lock = threading.Lock()

    def close(self) -> None:
        self.stream.close()


class DacsServer:
    """Serves agent sessions on one socket and admin pushes on a second,
    local-only control socket."""

    def __init__(
        self,
        repo_path,
        listen: tuple[str, int],
        control: tuple[str, int],
        web_identity: tuple[str, int] | None = None,
    ):
        self.repo_path = Path(repo_path)
        self.repo = load_repository(self.repo_path)
        self.web_identity = web_identity
        self._lock = threading.Lock()  # guards repo swap, sessions, version
        self._push_lock = threading.Lock()
        self._sessions: dict[str, _Session] = {}
        self._version = 0
        self._closed = False
        self._agent_listener = self._bind(listen)
        self._control_listener = self._bind(control)
        self.listen_addr = self._agent_listener.getsockname()[:2]
        self.control_addr = self._control_listener.getsockname()[:2]

    @staticmethod
    def _bind(addr: tuple[str, int]) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(addr)
        sock.listen(64)
        return sock

    def start(self) -> "DacsServer":
        threading.Thread(target=self._accept_agents, daemon=True).start()
        threading.Thread(target=self._accept_control, daemon=True).start()
        return self

    def stop(self) -> None:
        self._closed = True
        close_listener(self._agent_listener)
        close_listener(self._control_listener)
        with self._lock:
            sessions = list(self._sessions.values())
            self._sessions.clear()
        for session in sessions:
            session.close()

    def _next_version(self) -> int:
        # caller holds self._lock
        self._version += 1
        return self._version

    def session_table(self) -> dict[str, tuple[str, int]]:
        """client_ip -> (user, delivered rule set version); for inspection."""
        with self._lock:
            return {
                ip: (s.user, s.delivered_version) for ip, s in self._sessions.items()
            }

    # --- agent plane ---

    def _accept_agents(self) -> None:
        while not self._closed:
            try:
                conn, peer = self._agent_listener.accept()
            except OSError:
                return
            threading.Thread(target=self._agent_conn, args=(conn, peer), daemon=True).start()

    def _agent_conn(self, conn: socket.socket, peer) -> None:
        conn.settimeout(30)
        stream = MessageStream(conn)
        try:
            msg = stream.recv()
        except (WireError, OSError) as exc:
            log.warning("bad first frame from %s: %s", peer, exc)
            stream.close()
            return
        if not isinstance(msg, Login):
            try:
                stream.send(ErrorMsg("expected-login", f"got {type(msg).__name__}"))
            except OSError:
                pass
            stream.close()
            return
        try:
            session = self.handle_login(msg.user, msg.client_ip, stream)
        except DuplicateMatchKey as exc:
            try:
                stream.send(ErrorMsg("merge-error", str(exc)))
            except OSError:
                pass
            stream.close()
            return
        conn.settimeout(None)
        self._session_read_loop(session)

    def handle_login(self, user: str, client_ip: str, stream: MessageStream) -> _Session:
        """Register the session (superseding any older one for the same IP),
        send the merged rule set, then notify the web tier of the identity."""
        session = _Session(user, client_ip, stream)
        with self._lock:
            version = self._next_version()
            ruleset = compose_login_rules(self.repo, user, client_ip, version)
            groups = get_groups(self.repo, user)
            old = self._sessions.get(client_ip)
            self._sessions[client_ip] = session
        if old is not None:
            log.info("session for %s superseded by %s", client_ip, user)
            old.close()
        with session.send_lock:
            stream.send(RuleSetMsg(ruleset.version, tuple(format_rule(r) for r in ruleset.rules)))
        session.delivered_version = ruleset.version
        log.info("login %s from %s: %d rules, version %d",
                 user, client_ip, len(ruleset.rules), ruleset.version)
        self._notify_identity(user, client_ip, groups)
        return session

    def _session_read_loop(self, session: _Session) -> None:
        while True:
            try:
                msg = session.stream.recv()
            except (WireError, OSError):
                break
            if msg is None:
                break
            if isinstance(msg, Ack):
                session.delivered_version = max(session.delivered_version, msg.ref_version)
                log.debug("ack version %d from %s", msg.ref_version, session.client_ip)
            else:
                log.warning("unexpected %s from %s", type(msg).__name__, session.client_ip)
        with self._lock:
            if self._sessions.get(session.client_ip) is session:
                del self._sessions[session.client_ip]
        session.close()

    def _notify_identity(self, user: str, client_ip: str, groups: list[str]) -> None:
        """Fire-and-forget toward the web tier; never fails the login."""
        if self.web_identity is None:
            return
        from .wire import IdentityNotice  # local to keep module top uncluttered

        try:
            with socket.create_connection(self.web_identity, timeout=2) as sock:
                MessageStream(sock).send(IdentityNotice(user, client_ip, tuple(groups)))
        except (OSError, WireError) as exc:
            log.warning("identity notice for %s undeliverable: %s", user, exc)

    # --- admin plane ---

    def admin_push(self) -> int:
        """Reload the repository and redistribute to every session.

        Reload is atomic: a bad file raises ReloadError and the old
        repository stays active with nothing sent. Per-session send failures
        are logged and skipped.
        """
        with self._push_lock:
            try:
                new_repo = load_repository(self.repo_path)
            except (RepositoryError, OSError) as exc:
                raise ReloadError(str(exc)) from None
            with self._lock:
                self.repo = new_repo
                sessions = list(self._sessions.values())
                plans = []
                for session in sessions:
                    version = self._next_version()
                    plans.append(
                        (session, compose_login_rules(new_repo, session.user, session.client_ip, version))
                    )
            sent = 0
            for session, ruleset in plans:
                lines = tuple(format_rule(r) for r in ruleset.rules)
                try:
                    with session.send_lock:
                        session.stream.send(PushNotice())
                        session.stream.send(RuleSetMsg(ruleset.version, lines))
                    sent += 1
                except OSError as exc:
                    log.warning("push to %s failed: %s", session.client_ip, exc)
            log.info("pushed to %d of %d sessions", sent, len(plans))
            return sent

    def _accept_control(self) -> None:
        while not self._closed:
            try:
                conn, _ = self._control_listener.accept()
            except OSError:
                return
            threading.Thread(target=self._control_conn, args=(conn,), daemon=True).start()

    def _control_conn(self, conn: socket.socket) -> None:
        conn.settimeout(30)
        stream = MessageStream(conn)
        try:
            msg = stream.recv()
            if isinstance(msg, PushNotice):
                try:
                    count = self.admin_push()
                except ReloadError as exc:
                    stream.send(ErrorMsg("reload-error", str(exc).replace("\n", " ")))
                else:
                    stream.send(Ack(count))
            elif msg is not None:
                stream.send(ErrorMsg("bad-request", f"got {type(msg).__name__}"))
        except (WireError, OSError) as exc:
            log.warning("control connection error: %s", exc)
        finally:
            stream.close()


def push_command(control: tuple[str, int]) -> int:
    """Ask a running server to reload and redistribute; returns the count."""
    with socket.create_connection(control, timeout=10) as sock:
        stream = MessageStream(sock)
        stream.send(PushNotice())
        reply = stream.recv()
    if isinstance(reply, Ack):
        return reply.ref_version
    if isinstance(reply, ErrorMsg):
        raise ReloadError(f"{reply.code}: {reply.detail}")
    raise RepositoryError(f"unexpected reply {reply!r}")


def main(argv=None) -> int:
    import argparse

    setup_logging()
    parser = argparse.ArgumentParser(prog="dacsd", description="rule distribution server")
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve")
    p_serve.add_argument("--repo", required=True, metavar="FILE")
    p_serve.add_argument("--listen", required=True, metavar="IP:PORT")
    p_serve.add_argument("--control", required=True, metavar="IP:PORT")
    p_serve.add_argument("--web-identity", default="none", metavar="IP:PORT|none")

    p_push = sub.add_parser("push")
    p_push.add_argument("--control", required=True, metavar="IP:PORT")

    args = parser.parse_args(argv)
    if args.command == "push":
        try:
            count = push_command(parse_hostport(args.control))
        except (RepositoryError, OSError) as exc:
            print(f"push failed: {exc}")
            return 1
        print(f"pushed to {count} client(s)")
        return 0

    web_identity = None if args.web_identity == "none" else parse_hostport(args.web_identity)
    try:
        server = DacsServer(
            args.repo,
            listen=parse_hostport(args.listen),
            control=parse_hostport(args.control),
            web_identity=web_identity,
        ).start()
    except (RepositoryError, OSError) as exc:
        print(f"cannot start: {exc}")
        return 1
    log.info("agents on %s, control on %s",
             format_hostport(server.listen_addr), format_hostport(server.control_addr))
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
