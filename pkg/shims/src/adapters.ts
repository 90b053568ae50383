/**
 * Model adapters behind the protocol layer.
 *
 * A shim process binds exactly one role to one adapter. The stub adapters
 * here satisfy the wire contract deterministically without loading any
 * weights; adapters wrapping real models implement the same interfaces
 * and are selected through ShimConfig.model.
 */
import { createHash } from 'node:crypto'
import {
  Detection,
  DetectRequest,
  GeneratedImage,
  GenerateRequest,
  JobState,
  ProtocolError,
  ReviewRequest,
  TrainRequest,
} from './protocol.js'

export interface DetectAdapter {
  detect(req: DetectRequest): Promise<Detection[]>
}

export interface GenerateAdapter {
  generate(req: GenerateRequest): Promise<GeneratedImage[]>
}

export interface ReviewAdapter {
  review(req: ReviewRequest): Promise<string>
}

export interface TrainAdapter {
  submit(req: TrainRequest): Promise<string>
  poll(jobId: string): Promise<JobState>
}

function digest(parts: unknown[]): string {
  return createHash('sha1').update(JSON.stringify(parts)).digest('hex').slice(0, 12)
}

/**
 * Deterministic detector stub: one box derived from the hash of
 * (image_ref, prompt), scored above any sane threshold so threshold
 * plumbing is observable end to end.
 */
export class StubDetectAdapter implements DetectAdapter {
  async detect(req: DetectRequest): Promise<Detection[]> {
    const seed = parseInt(digest([req.image_ref, req.prompt]).slice(0, 6), 16)
    const x1 = (seed % 40) + 1
    const y1 = (seed % 30) + 1
    const phrase = req.prompt.split(' . ')[0] ?? req.prompt
    return [
      {
        box: [x1, y1, x1 + 40, y1 + 30],
        score: 0.9,
        phrase,
      },
    ]
  }
}

/** Emits descriptors pointing into the shim's workspace; no pixels. */
export class StubGenerateAdapter implements GenerateAdapter {
  constructor(private readonly workspace = '/tmp/detforge-shim') {}

  async generate(req: GenerateRequest): Promise<GeneratedImage[]> {
    const images: GeneratedImage[] = []
    for (let i = 0; i < req.count; i += 1) {
      const itemSeed = req.seed + i
      const id = `gen-${digest([req.model_ref, req.prompt, itemSeed])}`
      images.push({
        image_id: id,
        path: `${this.workspace}/${id}.png`,
        width: 128,
        height: 96,
        class: req.model_ref.split('/').pop() ?? 'object',
        seed: itemSeed,
      })
    }
    return images
  }
}

/** Always-positive reviewer, emitting the expected response shapes. */
export class StubReviewAdapter implements ReviewAdapter {
  async review(req: ReviewRequest): Promise<string> {
    if (req.task === 'photorealism') {
      return 'YES\nYES'
    }
    return [
      'Each drawn box was compared with the scene.',
      '```json',
      '{"Precision": "Yes", "Recall": "Yes", "Fit": "Yes"}',
      '```',
    ].join('\n')
  }
}

/** In-memory job store; jobs complete immediately. */
export class StubTrainAdapter implements TrainAdapter {
  private readonly jobs = new Map<string, JobState>()

  async submit(req: TrainRequest): Promise<string> {
    const jobId = `job-${digest([req.job_type, req.job])}`
    const artifact =
      req.job_type === 'diversify'
        ? `subject-model/${String(req.job.instance_name ?? 'instance')}-k${String(
            req.job.steps_multiplier ?? 0,
          )}`
        : `models/${jobId}.json`
    this.jobs.set(jobId, { job_id: jobId, status: 'succeeded', artifact_ref: artifact })
    return jobId
  }

  async poll(jobId: string): Promise<JobState> {
    const state = this.jobs.get(jobId)
    if (!state) {
      throw new ProtocolError('unknown_job', `no such job '${jobId}'`)
    }
    return state
  }
}

export interface AdapterSet {
  detect?: DetectAdapter
  generate?: GenerateAdapter
  review?: ReviewAdapter
  train?: TrainAdapter
}

export function stubAdapters(): Required<AdapterSet> {
  return {
    detect: new StubDetectAdapter(),
    generate: new StubGenerateAdapter(),
    review: new StubReviewAdapter(),
    train: new StubTrainAdapter(),
  }
}
