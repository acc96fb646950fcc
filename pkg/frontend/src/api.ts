/** Typed client for the grounded survey assistant JSON API. */

export interface GroundedAnswer {
  status: 'answered' | 'refused';
  answer_text: string;
  citations: Record<string, string>; // numeric token -> evidence cell id
  pmt_notes: string[];
  refusal_reason: string;
  missing_evidence: string;
}

export interface CrosstabRow {
  level: string;
  n: number;
  percent: Record<string, number>;
}

export interface EvidenceCell {
  cell_id: string;
  kind: 'marginal' | 'crosstab';
  fields: string[];
  support_n: number;
  stage_tags: string[];
  payload: { percent?: Record<string, number>; rows?: CrosstabRow[]; columns?: string[] };
  insufficient: boolean;
  provenance: string;
}

export interface AskResponse {
  answer: GroundedAnswer;
  binding: { fields: string[]; method: string; notes: string[] };
  evidence: EvidenceCell[];
  omissions: { kind: string; fields: string[]; reason: string }[];
}

export type AskResult =
  | { ok: true; data: AskResponse }
  | { ok: false; status: number; message: string };

export async function ask(baseUrl: string, question: string): Promise<AskResult> {
  try {
    const resp = await fetch(`${baseUrl}/ask`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ question }),
    });
    if (!resp.ok) {
      let message = `service error (HTTP ${resp.status})`;
      try {
        const body = await resp.json();
        if (body && typeof body.detail === 'string') message = body.detail;
      } catch {
        /* non-JSON error body; keep the generic message */
      }
      return { ok: false, status: resp.status, message };
    }
    return { ok: true, data: (await resp.json()) as AskResponse };
  } catch {
    return { ok: false, status: 0, message: 'service unreachable' };
  }
}
