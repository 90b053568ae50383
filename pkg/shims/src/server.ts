/**
 * Express app factory: one role per process, each serving its slice of
 * the wire protocol plus /healthz. Malformed requests become typed
 * protocol errors, never crashes.
 */
import express, { Express, NextFunction, Request, Response } from 'express'
import { AdapterSet } from './adapters.js'
import {
  detectRequestSchema,
  detectResponse,
  generateRequestSchema,
  generateResponse,
  healthzResponse,
  jobStatusResponse,
  ProtocolError,
  reviewRequestSchema,
  reviewResponse,
  Role,
  trainRequestSchema,
  trainResponse,
  validationError,
} from './protocol.js'

function sendError(res: Response, error: ProtocolError): void {
  res.status(error.httpStatus).json(error.toJSON())
}

function asyncRoute(
  handler: (req: Request, res: Response) => Promise<void>,
): (req: Request, res: Response, next: NextFunction) => void {
  return (req, res, next) => {
    handler(req, res).catch(next)
  }
}

export function createApp(role: Role, adapters: AdapterSet): Express {
  const app = express()
  app.use(
    express.json({
      limit: '20mb',
      // keep body-parser failures distinguishable from schema failures
      verify: () => undefined,
    }),
  )

  // express.json throws SyntaxError on unparseable bodies
  app.use((err: unknown, _req: Request, res: Response, next: NextFunction) => {
    if (err instanceof SyntaxError) {
      sendError(res, new ProtocolError('bad_request', 'request body is not valid JSON'))
      return
    }
    next(err)
  })

  app.get('/healthz', (_req, res) => {
    res.json(healthzResponse(role))
  })

  if (role === 'detect' && adapters.detect) {
    const adapter = adapters.detect
    app.post(
      '/detect',
      asyncRoute(async (req, res) => {
        const parsed = detectRequestSchema.safeParse(req.body ?? {})
        if (!parsed.success) throw validationError(parsed.error)
        const detections = await adapter.detect(parsed.data)
        res.json(detectResponse(parsed.data, detections))
      }),
    )
  }

  if (role === 'generate' && adapters.generate) {
    const adapter = adapters.generate
    app.post(
      '/generate',
      asyncRoute(async (req, res) => {
        const parsed = generateRequestSchema.safeParse(req.body ?? {})
        if (!parsed.success) throw validationError(parsed.error)
        const images = await adapter.generate(parsed.data)
        res.json(generateResponse(parsed.data, images))
      }),
    )
  }

  if (role === 'review' && adapters.review) {
    const adapter = adapters.review
    app.post(
      '/review',
      asyncRoute(async (req, res) => {
        const parsed = reviewRequestSchema.safeParse(req.body ?? {})
        if (!parsed.success) throw validationError(parsed.error)
        const text = await adapter.review(parsed.data)
        res.json(reviewResponse(parsed.data, text))
      }),
    )
  }

  if (role === 'train' && adapters.train) {
    const adapter = adapters.train
    app.post(
      '/train',
      asyncRoute(async (req, res) => {
        const parsed = trainRequestSchema.safeParse(req.body ?? {})
        if (!parsed.success) throw validationError(parsed.error)
        const jobId = await adapter.submit(parsed.data)
        res.json(trainResponse(parsed.data, jobId))
      }),
    )
    app.get(
      '/jobs/:id',
      asyncRoute(async (req, res) => {
        const state = await adapter.poll(req.params.id as string)
        res.json(jobStatusResponse(state))
      }),
    )
  }

  // every other route is outside this shim's contract
  app.use((_req: Request, res: Response) => {
    sendError(res, new ProtocolError('not_found', 'no such route on this shim'))
  })

  // typed errors pass through; anything else is an internal error
  app.use((err: unknown, _req: Request, res: Response, _next: NextFunction) => {
    if (err instanceof ProtocolError) {
      sendError(res, err)
      return
    }
    const message = err instanceof Error ? `${err.name}: ${err.message}` : String(err)
    sendError(res, new ProtocolError('internal', message))
  })

  return app
}
