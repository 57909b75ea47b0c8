/** Wire types for the session HTTP API. */

export interface RecognizedEntity {
  id: number;
  name: string;
}

export interface Recommendation {
  item_id: number;
  name: string;
  score: number;
}

export interface UtteranceResponse {
  response_tokens: string[];
  recommendations: Recommendation[];
  entities_recognized: RecognizedEntity[];
}

export interface SessionTurn {
  role: "user" | "system";
  tokens: string[];
  entities: number[];
  recommendations?: Recommendation[];
}

export interface SessionSnapshot {
  id: string;
  turns: SessionTurn[];
  entities: number[];
  recommendations: Recommendation[];
  entity_names: Record<string, string>;
}
