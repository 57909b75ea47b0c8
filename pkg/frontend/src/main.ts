import { ApiClient, ApiError } from "./api";
import {
  applyError,
  applyUtteranceResponse,
  beginSend,
  ChatViewState,
  clearSession,
  hydrateFromSnapshot,
  initialState,
  setK,
  startSession,
} from "./state";
import { renderBanner, renderCards, renderChips, renderMessages, renderStatus } from "./render";

const STORAGE_KEY = "mscrs-session-id";

const api = new ApiClient("");
let state: ChatViewState = initialState();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function render(): void {
  el("transcript").innerHTML = renderMessages(state);
  el("cards").innerHTML = renderCards(state);
  el("chips").innerHTML = renderChips(state);
  el("banner").innerHTML = renderBanner(state);
  el("status").textContent = renderStatus(state);
  const input = el<HTMLInputElement>("utterance");
  const send = el<HTMLButtonElement>("send");
  input.disabled = state.pending || !state.sessionId;
  send.disabled = state.pending || !state.sessionId;
  if (input.value === "" && state.draft) input.value = state.draft;
  const transcript = el("transcript");
  transcript.scrollTop = transcript.scrollHeight;
  const banner = document.getElementById("banner-new-session");
  if (banner) banner.addEventListener("click", () => void newSession());
}

function update(next: ChatViewState): void {
  state = next;
  render();
}

async function newSession(): Promise<void> {
  try {
    const id = await api.createSession();
    localStorage.setItem(STORAGE_KEY, id);
    update(startSession(state, id));
  } catch (err) {
    update(applyError(state, describe(err)));
  }
}

async function restoreSession(id: string): Promise<void> {
  try {
    const snapshot = await api.getSession(id);
    update(hydrateFromSnapshot(state, snapshot));
  } catch (err) {
    localStorage.removeItem(STORAGE_KEY);
    update(applyError(clearSession(state), describe(err)));
  }
}

async function send(): Promise<void> {
  const input = el<HTMLInputElement>("utterance");
  const text = input.value.trim();
  if (!text || state.pending || !state.sessionId) return;
  update(beginSend(state, text));
  try {
    const resp = await api.postUtterance(state.sessionId, text, state.k);
    input.value = "";
    update(applyUtteranceResponse(state, text, resp));
  } catch (err) {
    if (err instanceof ApiError && err.status === 404) {
      localStorage.removeItem(STORAGE_KEY);
      update(applyError(state, "session expired; start a new one"));
    } else {
      update(applyError(state, describe(err)));
    }
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return `${err.code}: ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}

async function boot(): Promise<void> {
  el<HTMLButtonElement>("send").addEventListener("click", () => void send());
  el<HTMLInputElement>("utterance").addEventListener("keydown", (e) => {
    if (e.key === "Enter") void send();
  });
  el<HTMLButtonElement>("new-session").addEventListener("click", () => void newSession());
  const kSelect = el<HTMLSelectElement>("k-select");
  kSelect.addEventListener("change", () => {
    update(setK(state, Number(kSelect.value)));
  });

  const stored = localStorage.getItem(STORAGE_KEY);
  if (stored) {
    await restoreSession(stored);
  } else {
    await newSession();
  }
}

window.addEventListener("DOMContentLoaded", () => void boot());
