/** Per-panel request gate: at most one render in flight per panel.
 *
 * Starting a new request for a panel aborts the one already running, and a
 * superseded request can never overwrite a newer result — completions are
 * applied only if they are still the latest request for their panel.
 */

export type RenderTask<T> = (signal: AbortSignal) => Promise<T>;

interface PanelSlot {
  controller: AbortController;
  seq: number;
}

export class RenderQueue {
  private readonly slots = new Map<string, PanelSlot>();
  private nextSeq = 0;

  /** Number of panels with a request currently in flight. */
  get inFlight(): number {
    return this.slots.size;
  }

  /**
   * Run `task` as the latest request for `panel`. Resolves with the task's
   * result, or with null if the request was superseded or aborted.
   */
  async run<T>(panel: string, task: RenderTask<T>): Promise<T | null> {
    const previous = this.slots.get(panel);
    if (previous) previous.controller.abort();

    const slot: PanelSlot = { controller: new AbortController(), seq: this.nextSeq++ };
    this.slots.set(panel, slot);

    try {
      const result = await task(slot.controller.signal);
      if (this.slots.get(panel)?.seq !== slot.seq) return null; // superseded
      return result;
    } catch (err) {
      if (slot.controller.signal.aborted) return null; // cancelled, not an error
      throw err;
    } finally {
      if (this.slots.get(panel)?.seq === slot.seq) this.slots.delete(panel);
    }
  }

  /** Abort whatever is in flight (all panels, or just one). */
  cancel(panel?: string): void {
    if (panel !== undefined) {
      this.slots.get(panel)?.controller.abort();
      this.slots.delete(panel);
      return;
    }
    for (const slot of this.slots.values()) slot.controller.abort();
    this.slots.clear();
  }
}
