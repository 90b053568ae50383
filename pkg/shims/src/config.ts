/** Shim process configuration: file-based with environment overrides. */
import { readFileSync } from 'node:fs'
import { z } from 'zod'
import { PROTOCOL_VERSION, Role } from './protocol.js'

const shimConfigSchema = z
  .object({
    role: z.enum(['detect', 'generate', 'review', 'train']),
    model: z.string().default('stub'),
    device: z.string().default('cpu'),
    protocol_version: z.string().default(PROTOCOL_VERSION),
    port: z.number().int().positive().default(8080),
    workspace: z.string().default('/tmp/detforge-shim'),
  })
  .strip()

export type ShimConfig = z.infer<typeof shimConfigSchema>

export function loadConfig(path?: string): ShimConfig {
  let raw: Record<string, unknown> = {}
  if (path) {
    raw = JSON.parse(readFileSync(path, 'utf-8'))
  }
  const env = process.env
  if (env.SHIM_ROLE) raw.role = env.SHIM_ROLE
  if (env.SHIM_MODEL) raw.model = env.SHIM_MODEL
  if (env.SHIM_DEVICE) raw.device = env.SHIM_DEVICE
  if (env.SHIM_PORT) raw.port = Number(env.SHIM_PORT)
  if (env.SHIM_WORKSPACE) raw.workspace = env.SHIM_WORKSPACE
  const parsed = shimConfigSchema.safeParse(raw)
  if (!parsed.success) {
    throw new Error(`invalid shim config: ${parsed.error.issues[0]?.message}`)
  }
  if (parsed.data.protocol_version !== PROTOCOL_VERSION) {
    throw new Error(
      `protocol_version mismatch: shim speaks ${PROTOCOL_VERSION}, ` +
        `config says ${parsed.data.protocol_version}`,
    )
  }
  return parsed.data
}

export function roleOf(config: ShimConfig): Role {
  return config.role
}
