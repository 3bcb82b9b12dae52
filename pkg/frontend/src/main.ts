/** Browser entry point: mount the editor against the hosting service. */

import { ApiClient } from "./api.js";
import { EditorApp } from "./app.js";

function apiBase(): string {
  const override = new URLSearchParams(window.location.search).get("api");
  return override ?? window.location.origin;
}

const root = document.getElementById("editor");
if (!root) throw new Error("missing #editor mount point");

const app = new EditorApp(root, new ApiClient(apiBase()));
void app.start();
