import type {
  FrameJobPayload,
  Job,
  PluginMeta,
  StoryDoc,
  StoryManifest,
} from './types';

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let code = 'error';
  let message = response.statusText;
  try {
    const body = await response.json();
    code = body.error ?? code;
    message = body.message ?? JSON.stringify(body);
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(response.status, code, message);
}

export interface PollOptions {
  intervalMs?: number;
  timeoutMs?: number;
  onUpdate?: (job: Job) => void;
}

export class ServiceClient {
  constructor(
    private readonly baseUrl: string = '',
    private readonly fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      throw await parseError(response);
    }
    return (await response.json()) as T;
  }

  listPlugins(): Promise<PluginMeta[]> {
    return this.request('/plugins');
  }

  getPlugin(name: string): Promise<PluginMeta> {
    return this.request(`/plugins/${encodeURIComponent(name)}`);
  }

  uploadPlugin(file: File): Promise<PluginMeta> {
    const form = new FormData();
    form.append('file', file);
    return this.request('/plugins', { method: 'POST', body: form });
  }

  submitFrameJob(payload: FrameJobPayload): Promise<{ job_id: string; request_hash: string }> {
    return this.request('/jobs/frame', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(payload),
    });
  }

  getJob(jobId: string): Promise<Job> {
    return this.request(`/jobs/${encodeURIComponent(jobId)}`);
  }

  jobImageUrl(jobId: string): string {
    return `${this.baseUrl}/jobs/${encodeURIComponent(jobId)}/image`;
  }

  /** Long-poll a job until it settles; resolves on done, rejects on failed. */
  async pollJob(jobId: string, options: PollOptions = {}): Promise<Job> {
    const interval = options.intervalMs ?? 300;
    const deadline = Date.now() + (options.timeoutMs ?? 120_000);
    for (;;) {
      const job = await this.getJob(jobId);
      options.onUpdate?.(job);
      if (job.state === 'done') {
        return job;
      }
      if (job.state === 'failed') {
        throw new ApiError(500, 'job_failed', job.error_detail ?? 'job failed');
      }
      if (Date.now() >= deadline) {
        throw new ApiError(504, 'poll_timeout', `job ${jobId} still ${job.state}`);
      }
      await new Promise((resolve) => setTimeout(resolve, interval));
    }
  }

  createStory(doc: StoryDoc): Promise<{ story_id: string; frames: number }> {
    return this.request('/stories', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(doc),
    });
  }

  submitStoryJob(
    storyId: string,
    options: { steps?: number; guidance_scale?: number; workers?: number } = {},
  ): Promise<{ job_id: string }> {
    return this.request('/jobs/story', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ story_id: storyId, ...options }),
    });
  }

  getStoryFrames(storyId: string): Promise<StoryManifest> {
    return this.request(`/stories/${encodeURIComponent(storyId)}/frames`);
  }

  storyFrameImageUrl(storyId: string, frameId: string): string {
    return `${this.baseUrl}/stories/${encodeURIComponent(storyId)}/frames/${encodeURIComponent(frameId)}/image`;
  }
}
