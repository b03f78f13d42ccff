// Typed client for the /api/v1 annotation endpoints.

export type TaskKind = 'verify' | 'blind_label';

export interface Task {
  task_id: string;
  item_id: string;
  image_url: string;
  kind: TaskKind;
  annotator: string;
  proposed_label?: string;
}

export interface MetricsSnapshot {
  schema: number;
  counters: { a1: number; b1: number; a2: number; b2: number; t: number; fn_num: number };
  metrics: {
    efficiency: number;
    ac: number | null;
    hcac: number | null;
    hvac: number | null;
    fn: number | null;
    hcfn: number | null;
  };
  human_estimates: number;
  dict_updates: number;
  disagreement_rate: number;
  queue_depth: number;
}

export type SubmitResult = { status: 'finalized'; final: string } | { status: 'pending' };

export class LeaseExpiredError extends Error {}
export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = '',
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    return this.fetchFn(`${this.baseUrl}${path}`, init);
  }

  /** Lease the next task for this annotator; null when the queue is empty. */
  async nextTask(annotator: string): Promise<Task | null> {
    const res = await this.request(
      `/api/v1/tasks/next?annotator=${encodeURIComponent(annotator)}`,
    );
    if (res.status === 204) return null;
    if (!res.ok) throw new ApiError(`tasks/next failed: ${res.status}`, res.status);
    return (await res.json()) as Task;
  }

  async submitLabel(taskId: string, label: string): Promise<SubmitResult> {
    const res = await this.request(`/api/v1/tasks/${encodeURIComponent(taskId)}/label`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ label }),
    });
    if (res.status === 409) throw new LeaseExpiredError(`lease gone for ${taskId}`);
    if (!res.ok) throw new ApiError(`submit failed: ${res.status}`, res.status);
    return (await res.json()) as SubmitResult;
  }

  async metrics(): Promise<MetricsSnapshot> {
    const res = await this.request('/api/v1/metrics');
    if (!res.ok) throw new ApiError(`metrics failed: ${res.status}`, res.status);
    return (await res.json()) as MetricsSnapshot;
  }

  async imageBytes(imageUrl: string): Promise<Uint8Array> {
    const res = await this.request(imageUrl);
    if (!res.ok) throw new ApiError(`image failed: ${res.status}`, res.status);
    return new Uint8Array(await res.arrayBuffer());
  }
}
