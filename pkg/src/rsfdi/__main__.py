from .cli_harness import main

raise SystemExit(main())
