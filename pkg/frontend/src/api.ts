/** Typed client for the rating HTTP API.
 *
 * Panel order is returned exactly as the server sent it and is never
 * reordered or augmented on the client.
 */

export interface SessionCase {
  id: string;
  status: Record<string, boolean>;
}

export interface SessionView {
  cases: SessionCase[];
  raters: string[];
}

export interface PanelView {
  label: string;
  image_url: string;
}

export interface CaseView {
  case_id: string;
  panels: PanelView[];
  reference_url: string;
}

export interface RankingPayload {
  rater: string;
  case_id: string;
  ranking: string[];
}

export type SubmitResult =
  | { kind: "accepted" }
  | { kind: "rejected"; message: string }
  | { kind: "offline" };

export class ApiError extends Error {}

type FetchLike = typeof fetch;

async function getJson<T>(url: string, fetchFn: FetchLike): Promise<T> {
  const resp = await fetchFn(url);
  if (!resp.ok) {
    throw new ApiError(`${url}: HTTP ${resp.status}`);
  }
  return (await resp.json()) as T;
}

export function loadSession(fetchFn: FetchLike = fetch): Promise<SessionView> {
  return getJson<SessionView>("/api/session", fetchFn);
}

export function loadCase(
  caseId: string,
  fetchFn: FetchLike = fetch,
): Promise<CaseView> {
  return getJson<CaseView>(`/api/case/${encodeURIComponent(caseId)}`, fetchFn);
}

/** POST a ranking. Network failures resolve to "offline" so the caller
 * can queue the payload; HTTP 400 surfaces the server's message. */
export async function submitRanking(
  payload: RankingPayload,
  fetchFn: FetchLike = fetch,
): Promise<SubmitResult> {
  let resp: Response;
  try {
    resp = await fetchFn("/api/ranking", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  } catch {
    return { kind: "offline" };
  }
  if (resp.ok) {
    return { kind: "accepted" };
  }
  let message = `HTTP ${resp.status}`;
  try {
    const body = (await resp.json()) as { error?: string };
    if (body.error) {
      message = body.error;
    }
  } catch {
    // non-JSON error body; keep the status text
  }
  return { kind: "rejected", message };
}
