import type { SessionSnapshot, UtteranceResponse } from "./types";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(resp: Response): Promise<ApiError> {
  let code = "http_error";
  let message = `${resp.status}`;
  try {
    const body = await resp.json();
    if (body && body.detail) {
      code = body.detail.code ?? code;
      message = body.detail.message ?? message;
    }
  } catch {
    // non-JSON error body: keep the status text
  }
  return new ApiError(resp.status, code, message);
}

/** Thin typed client over the four session endpoints. */
export class ApiClient {
  constructor(private readonly base: string = "") {}

  private url(path: string): string {
    return `${this.base}${path}`;
  }

  async health(): Promise<{ status: string; model_loaded: boolean }> {
    const resp = await fetch(this.url("/health"));
    if (!resp.ok) throw await parseError(resp);
    return resp.json();
  }

  async createSession(): Promise<string> {
    const resp = await fetch(this.url("/sessions"), { method: "POST" });
    if (!resp.ok) throw await parseError(resp);
    const body = await resp.json();
    return body.id as string;
  }

  async getSession(id: string): Promise<SessionSnapshot> {
    const resp = await fetch(this.url(`/sessions/${encodeURIComponent(id)}`));
    if (!resp.ok) throw await parseError(resp);
    return resp.json();
  }

  async postUtterance(
    id: string,
    text: string,
    k: number,
  ): Promise<UtteranceResponse> {
    const resp = await fetch(
      this.url(`/sessions/${encodeURIComponent(id)}/utterances`),
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ text, k }),
      },
    );
    if (!resp.ok) throw await parseError(resp);
    return resp.json();
  }
}
