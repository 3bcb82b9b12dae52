"""HTTP service for scene rendering and attribute-exchange editing.

Scenes are read-only files in a directory; edit sessions are in-memory
composites keyed by a content hash of (base, source, attribute), so
identical POSTs are idempotent and a service restart reproduces the same
session ids and the same render bytes. JSON in, JSON or PNG out.
"""

import hashlib
import json
import logging
import math
import os
import threading
from collections import OrderedDict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .imgio import encode_rgb_png
from .indexing import AttributeCatalog
from .render import render_image, resolve_active_labels
from .sampling import orbit_camera
from .sceneio import CatalogMismatchError, load_scene

log = logging.getLogger(__name__)

SCENE_SUFFIX = ".attr"
SESSION_CAP = 64
MAX_RES = 512
DEFAULT_PORT = 8437


class HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class SceneStore:
    """Lazy, cached read-only view of the *.attr files in one directory."""

    def __init__(self, scene_dir):
        self.scene_dir = scene_dir
        self._lock = threading.Lock()
        self._scenes = {}
        self._digests = {}

    def ids(self):
        try:
            names = os.listdir(self.scene_dir)
        except FileNotFoundError:
            return []
        return sorted(os.path.splitext(n)[0] for n in names
                      if n.endswith(SCENE_SUFFIX))

    def _path(self, scene_id: str) -> str:
        # ids come from url queries; never let them escape the directory
        if "/" in scene_id or "\\" in scene_id or scene_id in ("", ".", ".."):
            raise KeyError(scene_id)
        path = os.path.join(self.scene_dir, scene_id + SCENE_SUFFIX)
        if not os.path.isfile(path):
            raise KeyError(scene_id)
        return path

    def get(self, scene_id: str):
        path = self._path(scene_id)
        with self._lock:
            if scene_id not in self._scenes:
                self._scenes[scene_id] = load_scene(path)
            return self._scenes[scene_id]

    def digest(self, scene_id: str) -> str:
        path = self._path(scene_id)
        with self._lock:
            if scene_id not in self._digests:
                with open(path, "rb") as fh:
                    self._digests[scene_id] = hashlib.sha256(
                        fh.read()).hexdigest()
            return self._digests[scene_id]


class EditSessions:
    """Bounded LRU of edit composites keyed by content hash."""

    def __init__(self, cap: int = SESSION_CAP):
        self.cap = cap
        self._lock = threading.Lock()
        self._table = OrderedDict()

    def put(self, session_id: str, scene):
        with self._lock:
            self._table[session_id] = scene
            self._table.move_to_end(session_id)
            while len(self._table) > self.cap:
                self._table.popitem(last=False)

    def get(self, session_id: str):
        with self._lock:
            if session_id not in self._table:
                raise KeyError(session_id)
            self._table.move_to_end(session_id)
            return self._table[session_id]

    def __len__(self):
        with self._lock:
            return len(self._table)


def session_id(base_digest: str, source_digest: str, label: int) -> str:
    text = f"{base_digest}:{source_digest}:{label}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _query_float(q, key, default):
    if key not in q:
        return default
    try:
        value = float(q[key][-1])
    except ValueError:
        raise HttpError(400, f"{key} must be a number")
    if not math.isfinite(value):
        raise HttpError(400, f"{key} must be finite")
    return value


def _query_int(q, key, default, lo, hi):
    if key not in q:
        return default
    try:
        value = int(q[key][-1])
    except ValueError:
        raise HttpError(400, f"{key} must be an integer")
    if not lo <= value <= hi:
        raise HttpError(400, f"{key} must be in [{lo}, {hi}]")
    return value


class AttrFieldHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "attrfield"

    # -- plumbing ----------------------------------------------------------

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: bytes, content_type: str):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, payload):
        body = json.dumps(payload).encode()
        self._send(status, body, "application/json")

    def _fail(self, err: HttpError):
        self._send_json(err.status, {"error": str(err)})

    # -- request handling ----------------------------------------------------

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        url = urlparse(self.path)
        query = parse_qs(url.query)
        try:
            if url.path == "/health":
                self._send_json(200, {"status": "ok",
                                      "scenes": len(self.server.store.ids()),
                                      "sessions": len(self.server.sessions)})
            elif url.path == "/scenes":
                self._send_json(200, {"scenes": self.server.store.ids()})
            elif url.path == "/attributes":
                self._send_json(200, self._attributes(query))
            elif url.path == "/render":
                self._send(200, self._render(query), "image/png")
            elif url.path == "/ui" or url.path.startswith("/ui/"):
                self._static(url.path)
            else:
                raise HttpError(404, f"no such endpoint {url.path}")
        except HttpError as err:
            self._fail(err)
        except Exception:
            log.exception("request failed: %s", self.path)
            self._send_json(500, {"error": "internal error"})

    def do_POST(self):
        url = urlparse(self.path)
        try:
            if url.path == "/edit":
                self._send_json(200, self._edit())
            else:
                raise HttpError(404, f"no such endpoint {url.path}")
        except HttpError as err:
            self._fail(err)
        except Exception:
            log.exception("request failed: %s", self.path)
            self._send_json(500, {"error": "internal error"})

    # -- endpoints ----------------------------------------------------------

    def _scene_or_404(self, scene_id: str):
        try:
            return self.server.store.get(scene_id)
        except KeyError:
            raise HttpError(404, f"unknown scene {scene_id!r}")

    def _attributes(self, query):
        ids = self.server.store.ids()
        if "scene" in query:
            catalog = self._scene_or_404(query["scene"][-1]).catalog
        elif ids:
            catalog = self._scene_or_404(ids[0]).catalog
        else:
            catalog = AttributeCatalog()
        return {"attributes": [{"label": i, "name": n}
                               for i, n in enumerate(catalog)]}

    def _render(self, query) -> bytes:
        if "scene" not in query:
            raise HttpError(400, "scene query parameter is required")
        scene_id = query["scene"][-1]
        scene = self._scene_or_404(scene_id)
        if "edit" in query:
            try:
                scene = self.server.sessions.get(query["edit"][-1])
            except KeyError:
                raise HttpError(404, "unknown edit session")

        yaw = math.radians(_query_float(query, "yaw", 0.0) % 360.0)
        pitch = math.radians(_query_float(query, "pitch", 0.0))
        dist = _query_float(query, "dist", 3.0)
        res = _query_int(query, "res", 128, 8, MAX_RES)

        active = None
        if "attrs" in query and query["attrs"][-1]:
            names = [n.strip() for n in query["attrs"][-1].split(",")]
            try:
                active = [scene.catalog.label(n) for n in names]
            except KeyError as err:
                raise HttpError(400, str(err))
        try:
            camera = orbit_camera(yaw, pitch, dist, res)
            labels = resolve_active_labels(scene, active)
        except ValueError as err:
            raise HttpError(400, str(err))
        out = render_image(scene, camera, active=labels, seed=0,
                           n_threads=self.server.render_threads)
        return encode_rgb_png(out.rgb)

    def _edit(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            body = json.loads(raw.decode() or "{}")
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise HttpError(400, "body must be JSON")
        if not isinstance(body, dict):
            raise HttpError(400, "body must be a JSON object")
        missing = [k for k in ("base", "source", "attribute") if k not in body]
        if missing:
            raise HttpError(400, f"missing fields: {', '.join(missing)}")

        base = self._scene_or_404(str(body["base"]))
        source = self._scene_or_404(str(body["source"]))
        attribute = body["attribute"]
        try:
            label = (base.catalog.label(attribute)
                     if isinstance(attribute, str) else int(attribute))
        except (KeyError, TypeError, ValueError) as err:
            raise HttpError(400, f"bad attribute: {err}")
        if not 0 <= label < len(base.catalog):
            raise HttpError(400, f"label {label} outside catalog")

        from .sceneio import edit_swap
        try:
            composite = edit_swap(base, source, label)
        except CatalogMismatchError as err:
            raise HttpError(422, str(err))

        sid = session_id(self.server.store.digest(str(body["base"])),
                         self.server.store.digest(str(body["source"])), label)
        self.server.sessions.put(sid, composite)
        return {"session": sid, "base": body["base"],
                "source": body["source"], "attribute": base.catalog.names[label]}

    # -- static frontend ------------------------------------------------------

    _CONTENT_TYPES = {".html": "text/html", ".js": "text/javascript",
                      ".css": "text/css", ".map": "application/json",
                      ".svg": "image/svg+xml", ".png": "image/png",
                      ".ico": "image/x-icon"}

    def _static(self, path: str):
        root = self.server.ui_dir
        if not root:
            raise HttpError(404, "no ui bundle configured")
        rel = path[len("/ui"):].lstrip("/") or "index.html"
        full = os.path.realpath(os.path.join(root, rel))
        if not full.startswith(os.path.realpath(root) + os.sep) \
                and full != os.path.realpath(root):
            raise HttpError(404, "not found")
        if os.path.isdir(full):
            full = os.path.join(full, "index.html")
        if not os.path.isfile(full):
            raise HttpError(404, "not found")
        ext = os.path.splitext(full)[1].lower()
        with open(full, "rb") as fh:
            self._send(200, fh.read(),
                       self._CONTENT_TYPES.get(ext, "application/octet-stream"))


class AttrFieldServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, scene_dir, ui_dir=None, render_threads=1):
        super().__init__(address, AttrFieldHandler)
        self.store = SceneStore(scene_dir)
        self.sessions = EditSessions()
        self.ui_dir = ui_dir
        self.render_threads = render_threads


def build_server(scene_dir, host="127.0.0.1", port=DEFAULT_PORT, ui_dir=None,
                 render_threads=1) -> AttrFieldServer:
    if not os.path.isdir(scene_dir):
        raise NotADirectoryError(scene_dir)
    return AttrFieldServer((host, port), scene_dir, ui_dir=ui_dir,
                           render_threads=render_threads)


def run_server(scene_dir, host="127.0.0.1", port=DEFAULT_PORT, ui_dir=None,
               render_threads=1):
    server = build_server(scene_dir, host, port, ui_dir, render_threads)
    bound_host, bound_port = server.server_address[:2]
    # announce the actual address so callers may bind port 0 and discover it
    print(json.dumps({"host": str(bound_host), "port": int(bound_port)}),
          flush=True)
    log.info("serving %s on http://%s:%d", scene_dir, bound_host, bound_port)
    try:
        server.serve_forever()
    finally:
        server.server_close()
