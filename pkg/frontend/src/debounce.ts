/** Trailing-edge debounce: collapse a burst of calls into the last one. */

export interface Debounced<Args extends unknown[]> {
  (...args: Args): void;
  /** Drop any pending call. */
  cancel(): void;
  /** Run the pending call immediately, if there is one. */
  flush(): void;
  /** True while a call is waiting for the quiet period to end. */
  pending(): boolean;
}

export const DEFAULT_DEBOUNCE_MS = 150;

export function debounce<Args extends unknown[]>(
  fn: (...args: Args) => void,
  waitMs: number = DEFAULT_DEBOUNCE_MS,
): Debounced<Args> {
  let timer: ReturnType<typeof setTimeout> | null = null;
  let lastArgs: Args | null = null;

  const fire = () => {
    timer = null;
    const args = lastArgs as Args;
    lastArgs = null;
    fn(...args);
  };

  const debounced = (...args: Args) => {
    lastArgs = args;
    if (timer !== null) clearTimeout(timer);
    timer = setTimeout(fire, waitMs);
  };

  debounced.cancel = () => {
    if (timer !== null) clearTimeout(timer);
    timer = null;
    lastArgs = null;
  };

  debounced.flush = () => {
    if (timer !== null) {
      clearTimeout(timer);
      fire();
    }
  };

  debounced.pending = () => timer !== null;

  return debounced;
}
