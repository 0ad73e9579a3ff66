#pragma once

#include "sourcenet/catalog.hpp"
#include "sourcenet/config.hpp"
#include "sourcenet/container.hpp"
#include "sourcenet/dsp.hpp"
#include "sourcenet/errors.hpp"
#include "sourcenet/evalx.hpp"
#include "sourcenet/features.hpp"
#include "sourcenet/generate.hpp"
#include "sourcenet/mtmath.hpp"
#include "sourcenet/nn/checkpoint.hpp"
#include "sourcenet/nn/graph.hpp"
#include "sourcenet/nn/model.hpp"
#include "sourcenet/nn/ops.hpp"
#include "sourcenet/pipeline.hpp"
#include "sourcenet/psdr.hpp"
#include "sourcenet/raytrace.hpp"
#include "sourcenet/report.hpp"
#include "sourcenet/rng.hpp"
#include "sourcenet/simulate.hpp"
#include "sourcenet/train.hpp"
#include "sourcenet/velocity_model.hpp"
