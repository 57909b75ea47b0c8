import type { ChatViewState } from "./state";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderMessages(state: ChatViewState): string {
  if (state.messages.length === 0) {
    return '<p class="empty">No messages yet. Say hi!</p>';
  }
  return state.messages
    .map(
      (m) =>
        `<div class="msg msg-${m.role}"><span class="who">` +
        `${m.role === "user" ? "you" : "engine"}</span>` +
        `<span class="text">${escapeHtml(m.text)}</span></div>`,
    )
    .join("");
}

export function renderCards(state: ChatViewState): string {
  if (state.cards.length === 0) {
    return '<p class="empty">Recommendations appear here after your first message.</p>';
  }
  const rows = state.cards
    .map(
      (c) =>
        `<li class="card" data-item-id="${c.itemId}">` +
        `<span class="rank">${c.rank}</span>` +
        `<span class="name">${escapeHtml(c.name)}</span>` +
        `<span class="score">${c.score.toFixed(4)}</span></li>`,
    )
    .join("");
  return `<ol class="cards">${rows}</ol>`;
}

export function renderChips(state: ChatViewState): string {
  if (state.chips.length === 0) return "";
  const chips = state.chips
    .map((c) => `<span class="chip" data-entity-id="${c.id}">${escapeHtml(c.name)}</span>`)
    .join("");
  return `<div class="chips">${chips}</div>`;
}

export function renderBanner(state: ChatViewState): string {
  if (!state.error) return "";
  return (
    `<div class="banner error">${escapeHtml(state.error)} ` +
    '<button id="banner-new-session">new session</button></div>'
  );
}

export function renderStatus(state: ChatViewState): string {
  if (state.pending) return "thinking…";
  if (!state.sessionId) return "no session";
  return `session ${escapeHtml(state.sessionId)}`;
}
