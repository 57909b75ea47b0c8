import type {
  Recommendation,
  SessionSnapshot,
  UtteranceResponse,
} from "./types";

export interface ChatMessage {
  role: "user" | "system";
  text: string;
}

export interface RecommendationCard {
  rank: number;
  itemId: number;
  name: string;
  score: number;
}

export interface EntityChip {
  id: number;
  name: string;
}

/**
 * The whole view is a function of this state, and the state is always
 * reconstructible from a server snapshot plus the local k selector, so a
 * reload with a stored session id restores the exact view.
 */
export interface ChatViewState {
  sessionId: string | null;
  messages: ChatMessage[];
  cards: RecommendationCard[];
  chips: EntityChip[];
  k: number;
  pending: boolean;
  draft: string;
  error: string | null;
}

export function initialState(k = 5): ChatViewState {
  return {
    sessionId: null,
    messages: [],
    cards: [],
    chips: [],
    k,
    pending: false,
    draft: "",
    error: null,
  };
}

function toCards(recommendations: Recommendation[]): RecommendationCard[] {
  const sorted = [...recommendations].sort((a, b) => b.score - a.score);
  return sorted.map((r, idx) => ({
    rank: idx + 1,
    itemId: r.item_id,
    name: r.name,
    score: r.score,
  }));
}

export function startSession(state: ChatViewState, id: string): ChatViewState {
  return { ...initialState(state.k), sessionId: id };
}

/** Rebuild the full view from a server snapshot (reload / resync path). */
export function hydrateFromSnapshot(
  state: ChatViewState,
  snapshot: SessionSnapshot,
): ChatViewState {
  const messages: ChatMessage[] = snapshot.turns.map((turn) => ({
    role: turn.role,
    text: turn.tokens.join(" "),
  }));
  const mentioned = snapshot.entities.map((id) => ({
    id,
    name: snapshot.entity_names[String(id)] ?? `#${id}`,
  }));
  return {
    ...state,
    sessionId: snapshot.id,
    messages,
    cards: toCards(snapshot.recommendations),
    chips: mentioned,
    pending: false,
    error: null,
  };
}

export function beginSend(state: ChatViewState, text: string): ChatViewState {
  return { ...state, pending: true, draft: text, error: null };
}

/** Success path: append both sides of the exchange and refresh the panel. */
export function applyUtteranceResponse(
  state: ChatViewState,
  sentText: string,
  resp: UtteranceResponse,
): ChatViewState {
  return {
    ...state,
    pending: false,
    draft: "",
    error: null,
    messages: [
      ...state.messages,
      { role: "user", text: sentText },
      { role: "system", text: resp.response_tokens.join(" ") },
    ],
    cards: toCards(resp.recommendations),
    chips: resp.entities_recognized.map((e) => ({ id: e.id, name: e.name })),
  };
}

/** Failure path: surface the banner and keep the draft for retry. */
export function applyError(state: ChatViewState, message: string): ChatViewState {
  return { ...state, pending: false, error: message };
}

export function setK(state: ChatViewState, k: number): ChatViewState {
  return { ...state, k };
}

export function clearSession(state: ChatViewState): ChatViewState {
  return initialState(state.k);
}

export function cardsAreDescending(cards: RecommendationCard[]): boolean {
  for (let i = 1; i < cards.length; i++) {
    if (cards[i].score > cards[i - 1].score) return false;
  }
  return true;
}
