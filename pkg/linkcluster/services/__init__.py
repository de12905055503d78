# Domain operations built on linkcluster.core
