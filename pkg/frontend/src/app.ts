/** Interactive attribute editor.
 *
 * Wires the catalog panel, orbit sliders, and edit controls to the scene
 * service. All imagery is fetched from the render endpoint — the client
 * performs no field evaluation of its own; its only pixel work is byte
 * comparison for the changed-pixel highlight.
 */

import { ApiClient, ApiError, type RenderParams } from "./api.js";
import { DEFAULT_DEBOUNCE_MS, debounce, type Debounced } from "./debounce.js";
import { diffImages, highlightOverlay } from "./diff.js";
import { decodePng, pngDataUrl } from "./png.js";
import { RenderQueue } from "./render-queue.js";
import {
  CAMERA_LIMITS,
  type Camera,
  type CompareMode,
  type ViewerState,
  initialState,
  moveCamera,
} from "./state.js";

export interface AppOptions {
  /** Rendered image size in pixels (square). */
  res?: number;
  /** Quiet period for camera sliders before a render is issued. */
  debounceMs?: number;
}

const DEFAULT_RES = 128;

type PanelName = "before" | "after";

interface Panel {
  figure: HTMLElement;
  image: HTMLImageElement;
  overlay: HTMLImageElement;
  bytes: Uint8Array | null;
}

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  role?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (role) node.setAttribute("data-role", role);
  if (text !== undefined) node.textContent = text;
  return node;
}

export class EditorApp {
  state: ViewerState = initialState();

  private readonly doc: Document;
  private readonly res: number;
  private readonly queue = new RenderQueue();
  private readonly refreshSoon: Debounced<[]>;
  private busy = 0;

  private sceneSelect!: HTMLSelectElement;
  private sourceSelect!: HTMLSelectElement;
  private catalogList!: HTMLUListElement;
  private emptyState!: HTMLElement;
  private sliders!: Record<keyof Camera, HTMLInputElement>;
  private applyButton!: HTMLButtonElement;
  private revertButton!: HTMLButtonElement;
  private compareToggle!: HTMLInputElement;
  private highlightToggle!: HTMLInputElement;
  private changedCount!: HTMLElement;
  private errorBox!: HTMLElement;
  private panels!: Record<PanelName, Panel>;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: ApiClient,
    options: AppOptions = {},
  ) {
    this.doc = root.ownerDocument;
    this.res = options.res ?? DEFAULT_RES;
    this.refreshSoon = debounce(() => {
      void this.refresh();
    }, options.debounceMs ?? DEFAULT_DEBOUNCE_MS);
    this.buildDom();
  }

  /** Load scenes and the attribute catalog, then render the first view. */
  async start(): Promise<void> {
    this.enter();
    try {
      const scenes = await this.client.scenes();
      this.fillSelect(this.sceneSelect, scenes);
      this.fillSelect(this.sourceSelect, scenes);
      if (scenes.length === 0) {
        this.emptyState.textContent = "No scenes available — the scene directory is empty.";
        this.emptyState.style.display = "";
        return;
      }
      this.emptyState.style.display = "none";
      this.state.baseScene = scenes[0];
      this.sceneSelect.value = scenes[0];
      this.sourceSelect.value = scenes[0];
      await this.loadCatalog();
      await this.refresh();
    } finally {
      this.leave();
    }
  }

  /** Attribute names currently shown in the catalog panel, in order. */
  catalogEntries(): string[] {
    return Array.from(this.catalogList.querySelectorAll("li")).map((li) => li.textContent ?? "");
  }

  /** Raw PNG bytes most recently shown in a panel, or null. */
  imageBytes(panel: PanelName): Uint8Array | null {
    return this.panels[panel].bytes;
  }

  /** Resolve once no debounce is pending and no request is in flight. */
  async settle(): Promise<void> {
    for (;;) {
      if (!this.refreshSoon.pending() && this.queue.inFlight === 0 && this.busy === 0) return;
      await new Promise((resolve) => setTimeout(resolve, 10));
    }
  }

  // -- construction --------------------------------------------------------

  private buildDom(): void {
    const doc = this.doc;
    this.root.textContent = "";

    const header = el(doc, "header");
    this.sceneSelect = el(doc, "select", "scene-select");
    this.sourceSelect = el(doc, "select", "source-select");
    header.append(
      el(doc, "label", undefined, "Scene"),
      this.sceneSelect,
      el(doc, "label", undefined, "Swap from"),
      this.sourceSelect,
    );

    const catalog = el(doc, "aside", "catalog");
    catalog.append(el(doc, "h2", undefined, "Attributes"));
    this.emptyState = el(doc, "p", "empty-state");
    this.emptyState.style.display = "none";
    this.catalogList = el(doc, "ul", "attribute-list");
    catalog.append(this.emptyState, this.catalogList);

    const controls = el(doc, "section", "camera-controls");
    this.sliders = {
      yaw: this.slider("yaw", 0, 360, 1),
      pitch: this.slider("pitch", CAMERA_LIMITS.pitchMin, CAMERA_LIMITS.pitchMax, 1),
      dist: this.slider("dist", CAMERA_LIMITS.distMin, CAMERA_LIMITS.distMax, 0.1),
    };
    for (const [name, input] of Object.entries(this.sliders)) {
      const wrap = el(doc, "div");
      wrap.append(el(doc, "label", undefined, name), input);
      controls.append(wrap);
    }

    const editBar = el(doc, "section", "edit-controls");
    this.applyButton = el(doc, "button", "apply-edit", "Apply edit");
    this.revertButton = el(doc, "button", "revert", "Revert");
    this.compareToggle = el(doc, "input", "compare-toggle");
    this.compareToggle.type = "checkbox";
    this.highlightToggle = el(doc, "input", "highlight-toggle");
    this.highlightToggle.type = "checkbox";
    this.changedCount = el(doc, "span", "changed-count", "");
    editBar.append(
      this.applyButton,
      this.revertButton,
      el(doc, "label", undefined, "Side by side"),
      this.compareToggle,
      el(doc, "label", undefined, "Highlight changes"),
      this.highlightToggle,
      this.changedCount,
    );

    this.errorBox = el(doc, "p", "error");
    this.errorBox.style.display = "none";

    const stage = el(doc, "main", "stage");
    this.panels = {
      before: this.panel("before", "Before"),
      after: this.panel("after", "After"),
    };
    stage.append(this.panels.before.figure, this.panels.after.figure);
    this.panels.before.figure.style.display = "none";

    this.root.append(header, catalog, controls, editBar, this.errorBox, stage);
    this.bindEvents();
  }

  private slider(name: keyof Camera, min: number, max: number, step: number): HTMLInputElement {
    const input = el(this.doc, "input", `${name}-slider`);
    input.type = "range";
    input.min = String(min);
    input.max = String(max);
    input.step = String(step);
    input.value = String(this.state.camera[name]);
    return input;
  }

  private panel(name: PanelName, caption: string): Panel {
    const doc = this.doc;
    const figure = el(doc, "figure", `panel-${name}`);
    const image = el(doc, "img", `image-${name}`);
    image.alt = caption;
    const overlay = el(doc, "img", `overlay-${name}`);
    overlay.alt = `${caption} changed pixels`;
    overlay.style.display = "none";
    figure.append(image, overlay, el(doc, "figcaption", undefined, caption));
    return { figure, image, overlay, bytes: null };
  }

  private fillSelect(select: HTMLSelectElement, values: string[]): void {
    select.textContent = "";
    for (const value of values) {
      const option = this.doc.createElement("option");
      option.value = value;
      option.textContent = value;
      select.append(option);
    }
  }

  private bindEvents(): void {
    for (const name of ["yaw", "pitch", "dist"] as const) {
      this.sliders[name].addEventListener("input", () => {
        this.state = moveCamera(this.state, { [name]: Number(this.sliders[name].value) });
        this.refreshSoon();
      });
    }
    this.sceneSelect.addEventListener("change", () => {
      void this.changeScene(this.sceneSelect.value);
    });
    this.applyButton.addEventListener("click", () => {
      void this.applyEdit();
    });
    this.revertButton.addEventListener("click", () => {
      void this.revert();
    });
    this.compareToggle.addEventListener("change", () => {
      void this.setCompareMode(this.compareToggle.checked ? "side-by-side" : "single");
    });
    this.highlightToggle.addEventListener("change", () => {
      this.enter();
      void this.updateComparison().finally(() => this.leave());
    });
  }

  // -- interactions ---------------------------------------------------------

  private async changeScene(scene: string): Promise<void> {
    this.enter();
    try {
      this.state.baseScene = scene;
      this.state.editSession = null;
      this.state.attribute = null;
      await this.loadCatalog();
      await this.refresh();
    } finally {
      this.leave();
    }
  }

  private async loadCatalog(): Promise<void> {
    const attributes = this.state.baseScene
      ? await this.client.attributes(this.state.baseScene)
      : [];
    this.catalogList.textContent = "";
    for (const name of attributes) {
      const item = el(this.doc, "li", "attribute", name);
      item.addEventListener("click", () => this.selectAttribute(name, item));
      this.catalogList.append(item);
    }
  }

  private selectAttribute(name: string, item: HTMLLIElement): void {
    this.state.attribute = name;
    for (const li of this.catalogList.querySelectorAll("li")) li.classList.remove("selected");
    item.classList.add("selected");
  }

  private async applyEdit(): Promise<void> {
    const { baseScene, attribute } = this.state;
    const source = this.sourceSelect.value;
    if (!baseScene || !attribute || !source) {
      this.showError("Pick a scene, a source scene, and an attribute first.");
      return;
    }
    this.enter();
    try {
      this.state.editSession = await this.client.applyEdit(baseScene, source, attribute);
      this.clearError();
      await this.refresh();
    } catch (err) {
      this.showError(err);
    } finally {
      this.leave();
    }
  }

  private async revert(): Promise<void> {
    if (this.state.editSession === null) return;
    this.enter();
    try {
      this.state.editSession = null;
      await this.refresh();
    } finally {
      this.leave();
    }
  }

  private async setCompareMode(mode: CompareMode): Promise<void> {
    this.enter();
    try {
      this.state.compare = mode;
      this.panels.before.figure.style.display = mode === "side-by-side" ? "" : "none";
      await this.refresh();
    } finally {
      this.leave();
    }
  }

  // -- rendering ------------------------------------------------------------

  private renderParams(edit: string | null): RenderParams | null {
    if (!this.state.baseScene) return null;
    return {
      scene: this.state.baseScene,
      camera: this.state.camera,
      res: this.res,
      edit,
    };
  }

  /** Re-render every visible panel (one request per panel, latest wins). */
  private async refresh(): Promise<void> {
    this.enter();
    try {
      const jobs: Promise<void>[] = [this.refreshPanel("after", this.state.editSession)];
      if (this.state.compare === "side-by-side") {
        jobs.push(this.refreshPanel("before", null));
      }
      await Promise.all(jobs);
      await this.updateComparison();
    } catch (err) {
      this.showError(err);
    } finally {
      this.leave();
    }
  }

  private async refreshPanel(name: PanelName, edit: string | null): Promise<void> {
    const params = this.renderParams(edit);
    if (!params) return;
    const bytes = await this.queue.run(name, (signal) => this.client.render(params, signal));
    if (bytes === null) return; // superseded by a newer request
    const panel = this.panels[name];
    panel.bytes = bytes;
    panel.image.src = pngDataUrl(bytes);
  }

  /** Recompute the changed-pixel overlay and count for side-by-side mode. */
  private async updateComparison(): Promise<void> {
    const { before, after } = this.panels;
    const comparable =
      this.state.compare === "side-by-side" && before.bytes !== null && after.bytes !== null;
    if (!comparable || !this.highlightToggle.checked) {
      after.overlay.style.display = "none";
      this.changedCount.textContent = "";
      return;
    }
    const [a, b] = await Promise.all([
      decodePng(before.bytes as Uint8Array),
      decodePng(after.bytes as Uint8Array),
    ]);
    const diff = diffImages(a, b);
    this.changedCount.textContent = `${diff.changed} pixels changed`;
    after.overlay.src = pngDataUrl(highlightOverlay(diff));
    after.overlay.style.display = "";
  }

  // -- status ----------------------------------------------------------------

  private showError(err: unknown): void {
    const message =
      err instanceof ApiError
        ? err.message
        : err instanceof Error
          ? err.message
          : String(err);
    this.errorBox.textContent = message;
    this.errorBox.style.display = "";
  }

  private clearError(): void {
    this.errorBox.textContent = "";
    this.errorBox.style.display = "none";
  }

  private enter(): void {
    this.busy++;
  }

  private leave(): void {
    this.busy--;
  }
}
