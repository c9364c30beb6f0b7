from pix2graph.cli import main

raise SystemExit(main())
