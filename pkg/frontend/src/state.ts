/** Session state for the single-page client: one upload, one in-flight request. */

import type { ModelInfo, PredictionEntry } from "./api.js";

export type Phase = "idle" | "loading" | "results" | "error";

export interface SessionState {
  models: ModelInfo[];
  selected: Set<string>;
  image: File | null;
  inFlight: boolean;
  results: PredictionEntry[] | null;
  error: string | null;
}

export function initialState(): SessionState {
  return {
    models: [],
    selected: new Set(),
    image: null,
    inFlight: false,
    results: null,
    error: null,
  };
}

/** All registered models start selected, mirroring the three-model layout. */
export function withModels(state: SessionState, models: ModelInfo[]): SessionState {
  return { ...state, models, selected: new Set(models.map((m) => m.name)) };
}

export function toggleModel(state: SessionState, name: string): SessionState {
  const selected = new Set(state.selected);
  if (selected.has(name)) selected.delete(name);
  else selected.add(name);
  return { ...state, selected };
}

export function withImage(state: SessionState, image: File): SessionState {
  // each upload replaces the session: previous results and errors are dropped
  return { ...state, image, results: null, error: null };
}

export function canPredict(state: SessionState): boolean {
  return state.image !== null && state.selected.size > 0 && !state.inFlight;
}

export function phase(state: SessionState): Phase {
  if (state.inFlight) return "loading";
  if (state.error !== null) return "error";
  if (state.results !== null) return "results";
  return "idle";
}
