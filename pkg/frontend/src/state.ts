/** Viewer state: everything the editor needs to describe what is on screen. */

export interface Camera {
  /** Orbit angle around the vertical axis, degrees; wraps modulo 360. */
  yaw: number;
  /** Elevation angle, degrees; clamped to the slider range. */
  pitch: number;
  /** Distance from the subject; clamped to the slider range. */
  dist: number;
}

export type CompareMode = "single" | "side-by-side";

export interface ViewerState {
  /** Scene the viewer is editing, or null before one is chosen. */
  baseScene: string | null;
  camera: Camera;
  /** Attribute currently selected in the catalog panel, or null. */
  attribute: string | null;
  /** Server-issued edit session applied to the "after" view, or null. */
  editSession: string | null;
  compare: CompareMode;
}

export const CAMERA_LIMITS = {
  pitchMin: -85,
  pitchMax: 85,
  distMin: 1.0,
  distMax: 10.0,
} as const;

export const DEFAULT_CAMERA: Camera = { yaw: 30, pitch: 10, dist: 3.0 };

export function initialState(): ViewerState {
  return {
    baseScene: null,
    camera: { ...DEFAULT_CAMERA },
    attribute: null,
    editSession: null,
    compare: "single",
  };
}

function wrapDegrees(deg: number): number {
  const wrapped = deg % 360;
  return wrapped < 0 ? wrapped + 360 : wrapped;
}

/** Force a camera into the ranges the sliders (and the server) accept. */
export function clampCamera(camera: Camera): Camera {
  const { pitchMin, pitchMax, distMin, distMax } = CAMERA_LIMITS;
  return {
    yaw: wrapDegrees(camera.yaw),
    pitch: Math.min(pitchMax, Math.max(pitchMin, camera.pitch)),
    dist: Math.min(distMax, Math.max(distMin, camera.dist)),
  };
}

/** Apply a partial camera change, keeping the result in range. */
export function moveCamera(state: ViewerState, change: Partial<Camera>): ViewerState {
  return { ...state, camera: clampCamera({ ...state.camera, ...change }) };
}
