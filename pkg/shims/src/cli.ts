/** Start one shim process for one role: `node dist/cli.js [config.json]`. */
import { loadConfig } from './config.js'
import { createApp } from './server.js'
import { stubAdapters } from './adapters.js'
import { StubGenerateAdapter } from './adapters.js'

function main(): void {
  const config = loadConfig(process.argv[2])
  if (config.model !== 'stub') {
    throw new Error(
      `unknown model adapter '${config.model}': implement the role's adapter ` +
        'interface in adapters.ts and register it here',
    )
  }
  const adapters = stubAdapters()
  adapters.generate = new StubGenerateAdapter(config.workspace)
  const app = createApp(config.role, adapters)
  app.listen(config.port, () => {
    // eslint-disable-next-line no-console
    console.log(
      `${config.role} shim (model=${config.model}, device=${config.device}) ` +
        `listening on :${config.port}`,
    )
  })
}

main()
