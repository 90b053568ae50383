/**
 * Wire protocol shared with the pipeline engine.
 *
 * JSON over HTTP: POST /detect, /generate, /review, /train plus
 * GET /jobs/{id} and GET /healthz. Boxes are pixel xyxy floats with the
 * origin at the top-left. Every payload carries protocol_version.
 */
import { z } from 'zod'

export const PROTOCOL_VERSION = '1'

export const DEFAULT_BOX_THRESHOLD = 0.27
export const DEFAULT_TEXT_THRESHOLD = 0.25

export type Role = 'detect' | 'generate' | 'review' | 'train'

export type ErrorCode =
  | 'bad_request'
  | 'validation'
  | 'unsupported'
  | 'not_found'
  | 'unknown_job'
  | 'internal'

const ERROR_STATUS: Record<ErrorCode, number> = {
  bad_request: 400,
  validation: 400,
  unsupported: 400,
  not_found: 404,
  unknown_job: 404,
  internal: 500,
}

export class ProtocolError extends Error {
  readonly code: ErrorCode
  readonly httpStatus: number

  constructor(code: ErrorCode, message: string) {
    super(message)
    this.code = code
    this.httpStatus = ERROR_STATUS[code]
  }

  toJSON() {
    return {
      protocol_version: PROTOCOL_VERSION,
      error: { code: this.code, message: this.message },
    }
  }
}

export const detectRequestSchema = z
  .object({
    protocol_version: z.string().optional(),
    request_id: z.string().optional(),
    image_ref: z.string(),
    prompt: z.string(),
    box_threshold: z.number().default(DEFAULT_BOX_THRESHOLD),
    text_threshold: z.number().default(DEFAULT_TEXT_THRESHOLD),
    model_ref: z.string().nullish(),
  })
  .strip()

export type DetectRequest = z.infer<typeof detectRequestSchema>

export interface Detection {
  box: [number, number, number, number]
  score: number
  phrase: string
}

export const generateRequestSchema = z
  .object({
    protocol_version: z.string().optional(),
    request_id: z.string().optional(),
    model_ref: z.string(),
    prompt: z.string(),
    seed: z.number().int(),
    count: z.number().int().nonnegative().default(1),
  })
  .strip()

export type GenerateRequest = z.infer<typeof generateRequestSchema>

export interface GeneratedImage {
  image_id: string
  path: string
  width: number
  height: number
  class: string
  seed: number
}

export const reviewRequestSchema = z
  .object({
    protocol_version: z.string().optional(),
    request_id: z.string().optional(),
    task: z.enum(['boxes', 'photorealism']),
    image_ref: z.string().optional(),
    image_b64: z.string().optional(),
    system_prompt: z.string().default(''),
    user_prompt: z.string().default(''),
    metadata: z.record(z.string(), z.unknown()).default({}),
  })
  .strip()
  .refine((req) => Boolean(req.image_ref) || Boolean(req.image_b64), {
    message: 'one of image_ref/image_b64 is required',
  })

export type ReviewRequest = z.infer<typeof reviewRequestSchema>

export const trainRequestSchema = z
  .object({
    protocol_version: z.string().optional(),
    request_id: z.string().optional(),
    job_type: z.enum(['diversify', 'detector']),
    job: z.record(z.string(), z.unknown()),
  })
  .strip()

export type TrainRequest = z.infer<typeof trainRequestSchema>

export type JobStatus = 'pending' | 'running' | 'succeeded' | 'failed'

export interface JobState {
  job_id: string
  status: JobStatus
  artifact_ref?: string
  error?: string
}

export function detectResponse(req: DetectRequest, detections: Detection[]) {
  return {
    protocol_version: PROTOCOL_VERSION,
    request_id: req.request_id ?? '',
    thresholds: { box: req.box_threshold, text: req.text_threshold },
    detections,
  }
}

export function generateResponse(req: GenerateRequest, images: GeneratedImage[]) {
  return {
    protocol_version: PROTOCOL_VERSION,
    request_id: req.request_id ?? '',
    images,
  }
}

export function reviewResponse(req: ReviewRequest, text: string) {
  return {
    protocol_version: PROTOCOL_VERSION,
    request_id: req.request_id ?? '',
    text,
  }
}

export function trainResponse(req: TrainRequest, jobId: string) {
  return {
    protocol_version: PROTOCOL_VERSION,
    request_id: req.request_id ?? '',
    job_id: jobId,
  }
}

export function jobStatusResponse(state: JobState) {
  const body: Record<string, unknown> = {
    protocol_version: PROTOCOL_VERSION,
    job_id: state.job_id,
    status: state.status,
  }
  if (state.artifact_ref !== undefined) body.artifact_ref = state.artifact_ref
  if (state.error !== undefined) body.error = state.error
  return body
}

export function healthzResponse(role: Role | 'all') {
  return { status: 'ok', role, protocol_version: PROTOCOL_VERSION }
}

/** Turn a zod failure into the protocol's validation error. */
export function validationError(issue: z.ZodError): ProtocolError {
  const first = issue.issues[0]
  const path = first?.path?.join('.') || 'request'
  return new ProtocolError('validation', `${path}: ${first?.message ?? 'invalid'}`)
}
