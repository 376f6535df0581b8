#pragma once

#include "tdhnode/autodiff.hpp"
#include "tdhnode/checkpoint.hpp"
#include "tdhnode/data.hpp"
#include "tdhnode/encoders.hpp"
#include "tdhnode/errors.hpp"
#include "tdhnode/experiment.hpp"
#include "tdhnode/generator.hpp"
#include "tdhnode/hypergraph.hpp"
#include "tdhnode/laplacian.hpp"
#include "tdhnode/metrics.hpp"
#include "tdhnode/model.hpp"
#include "tdhnode/model_config.hpp"
#include "tdhnode/node_engine.hpp"
#include "tdhnode/params.hpp"
#include "tdhnode/pathways.hpp"
#include "tdhnode/training.hpp"
