/** Wires the session state, API client, and DOM together. */

import { describeError, fetchModels, predict } from "./api.js";
import { buildCard } from "./cards.js";
import {
  canPredict,
  initialState,
  phase,
  toggleModel,
  withImage,
  withModels,
  type SessionState,
} from "./state.js";

export interface AppOptions {
  baseUrl?: string;
  fetchImpl?: typeof fetch;
  /** Object-URL factory; injectable because test DOMs lack URL.createObjectURL. */
  createPreviewUrl?: (file: File) => string;
}

export interface App {
  state: () => SessionState;
  refreshModels: () => Promise<void>;
  runPredict: () => Promise<void>;
}

export function createApp(root: HTMLElement, options: AppOptions = {}): App {
  const doc = root.ownerDocument;
  const baseUrl = options.baseUrl ?? "";
  const fetchImpl = options.fetchImpl ?? fetch;
  const toPreviewUrl =
    options.createPreviewUrl ?? ((file: File) => URL.createObjectURL(file));

  let state = initialState();
  let previewUrl = "";

  root.innerHTML = `
    <header><h1>bonecheck</h1></header>
    <section class="controls">
      <div class="picker" data-role="picker"></div>
      <input type="file" accept="image/png,image/jpeg" data-role="file" />
      <label><input type="checkbox" checked data-role="cam" /> show activation maps</label>
      <button data-role="predict" disabled>Predict</button>
    </section>
    <p class="banner" data-role="banner" hidden></p>
    <p class="status" data-role="status" hidden>analyzing…</p>
    <section class="cards" data-role="cards"></section>
  `;

  const picker = root.querySelector<HTMLElement>('[data-role="picker"]')!;
  const fileInput = root.querySelector<HTMLInputElement>('[data-role="file"]')!;
  const camToggle = root.querySelector<HTMLInputElement>('[data-role="cam"]')!;
  const button = root.querySelector<HTMLButtonElement>('[data-role="predict"]')!;
  const banner = root.querySelector<HTMLElement>('[data-role="banner"]')!;
  const status = root.querySelector<HTMLElement>('[data-role="status"]')!;
  const cards = root.querySelector<HTMLElement>('[data-role="cards"]')!;

  function renderPicker(): void {
    picker.innerHTML = "";
    if (state.models.length === 0) {
      const empty = doc.createElement("p");
      empty.textContent = "No models registered.";
      picker.appendChild(empty);
      return;
    }
    for (const model of state.models) {
      const label = doc.createElement("label");
      const box = doc.createElement("input");
      box.type = "checkbox";
      box.value = model.name;
      box.checked = state.selected.has(model.name);
      box.addEventListener("change", () => {
        state = toggleModel(state, model.name);
        render();
      });
      label.appendChild(box);
      label.appendChild(doc.createTextNode(` ${model.name}`));
      picker.appendChild(label);
    }
  }

  function render(): void {
    const p = phase(state);
    button.disabled = !canPredict(state);
    status.hidden = p !== "loading";
    banner.hidden = p !== "error";
    banner.textContent = state.error ?? "";
    if (p !== "results") cards.innerHTML = "";
    renderPicker();
  }

  async function refreshModels(): Promise<void> {
    try {
      state = withModels(state, await fetchModels(baseUrl, fetchImpl));
      state = { ...state, error: null };
    } catch (err) {
      state = { ...state, error: describeError(err) };
    }
    render();
  }

  async function runPredict(): Promise<void> {
    const image = state.image;
    if (!canPredict(state) || image === null) return;
    // selection order follows the picker so cards line up with the checkboxes
    const chosen = state.models
      .map((m) => m.name)
      .filter((name) => state.selected.has(name));
    state = { ...state, inFlight: true, error: null, results: null };
    render();
    try {
      const results = await predict(
        baseUrl,
        image,
        chosen,
        camToggle.checked,
        fetchImpl,
      );
      state = { ...state, inFlight: false, results };
      render();
      cards.innerHTML = "";
      for (const entry of results) {
        cards.appendChild(buildCard(entry, previewUrl, doc));
      }
    } catch (err) {
      state = { ...state, inFlight: false, results: null, error: describeError(err) };
      render();
    }
  }

  fileInput.addEventListener("change", () => {
    const file = fileInput.files?.[0];
    if (!file) return;
    state = withImage(state, file);
    previewUrl = toPreviewUrl(file);
    render();
  });

  button.addEventListener("click", () => {
    void runPredict();
  });

  render();
  return { state: () => state, refreshModels, runPredict };
}
