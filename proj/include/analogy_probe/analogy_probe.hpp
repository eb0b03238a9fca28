#ifndef ANALOGY_PROBE_HPP
#define ANALOGY_PROBE_HPP

#include "alignment.hpp"
#include "core.hpp"
#include "dataset.hpp"
#include "engine.hpp"
#include "experiment.hpp"
#include "interventions.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "patchscopes.hpp"
#include "probing.hpp"
#include "report.hpp"
#include "tensor_archive.hpp"
#include "tokenizer.hpp"
#include "toy_model.hpp"

#endif
